//! Identifier rules shared by every on-disk format.
//!
//! Ids end up as columns in tab-separated files and as single lines in
//! manifests, so they may not contain whitespace or control characters.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid {kind} id {id:?}: {reason}")]
pub struct InvalidId {
    pub kind: &'static str,
    pub id: String,
    pub reason: &'static str,
}

pub fn validate_id(kind: &'static str, id: &str) -> Result<(), InvalidId> {
    let fail = |reason| {
        Err(InvalidId {
            kind,
            id: id.to_owned(),
            reason,
        })
    };
    if id.is_empty() {
        return fail("empty");
    }
    if id.chars().any(|c| c.is_whitespace() || c.is_control()) {
        return fail("contains whitespace or control characters");
    }
    Ok(())
}
