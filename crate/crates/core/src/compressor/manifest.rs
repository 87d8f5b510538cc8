//! Manifest text form:
//!
//! ```text
//! # sift-manifest 1
//! # keep_ratio 1/2
//! # tie_break score-desc,pair-id-asc
//! # exact true
//! # input_count 10
//! # kept_count 5
//! # threshold 0.25
//! # threshold_pair_id pair-0000007
//! # scorer reward-head
//! # checkpoint_sha256 9f…
//! pair-0000001
//! …
//! ```
//!
//! Selected ids follow in score-table order. Absent optional fields are
//! omitted.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::{CompressorError, KeepRatio, ScoreProvenance};

pub const MANIFEST_HEADER: &str = "# sift-manifest 1";
const TIE_BREAK: &str = "score-desc,pair-id-asc";

#[derive(Debug, Clone, PartialEq)]
pub struct CompressedManifest {
    pub keep_ratio: KeepRatio,
    /// False for manifests cut at an estimated threshold.
    pub exact: bool,
    pub input_count: u64,
    pub kept_count: u64,
    /// Score of the lowest-ranked kept entry; `None` when nothing is kept.
    pub threshold: Option<f64>,
    pub threshold_pair_id: Option<String>,
    pub provenance: ScoreProvenance,
    pub selected: Vec<String>,
}

impl CompressedManifest {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(MANIFEST_HEADER);
        s.push('\n');
        let _ = writeln!(s, "# keep_ratio {}", self.keep_ratio);
        let _ = writeln!(s, "# tie_break {TIE_BREAK}");
        let _ = writeln!(s, "# exact {}", self.exact);
        let _ = writeln!(s, "# input_count {}", self.input_count);
        let _ = writeln!(s, "# kept_count {}", self.kept_count);
        if let Some(t) = self.threshold {
            let _ = writeln!(s, "# threshold {t:?}");
        }
        if let Some(id) = &self.threshold_pair_id {
            let _ = writeln!(s, "# threshold_pair_id {id}");
        }
        let _ = writeln!(s, "# scorer {}", self.provenance.scorer);
        if let Some(h) = &self.provenance.checkpoint_sha256 {
            let _ = writeln!(s, "# checkpoint_sha256 {h}");
        }
        for id in &self.selected {
            s.push_str(id);
            s.push('\n');
        }
        s
    }

    pub fn parse(r: impl BufRead) -> Result<Self, CompressorError> {
        let mut fields: HashMap<String, String> = HashMap::new();
        let mut selected = Vec::new();
        let mut saw_header = false;
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let bad = |reason: String| CompressorError::CorruptManifest { line: i + 1, reason };
            if i == 0 {
                if line != MANIFEST_HEADER {
                    return Err(bad(format!("expected {MANIFEST_HEADER:?}")));
                }
                saw_header = true;
                continue;
            }
            if let Some(rest) = line.strip_prefix("# ") {
                if !selected.is_empty() {
                    return Err(bad("header field after pair ids".into()));
                }
                let (k, v) = rest
                    .split_once(' ')
                    .ok_or_else(|| bad("header field without value".into()))?;
                fields.insert(k.to_string(), v.to_string());
            } else if !line.is_empty() {
                selected.push(line);
            }
        }
        if !saw_header {
            return Err(CompressorError::CorruptManifest {
                line: 1,
                reason: "empty manifest".into(),
            });
        }
        let get = |k: &str| {
            fields.get(k).ok_or_else(|| CompressorError::CorruptManifest {
                line: 0,
                reason: format!("missing field {k}"),
            })
        };
        let num = |k: &str| -> Result<u64, CompressorError> {
            get(k)?.parse().map_err(|_| CompressorError::CorruptManifest {
                line: 0,
                reason: format!("field {k} is not an integer"),
            })
        };
        let m = CompressedManifest {
            keep_ratio: get("keep_ratio")?.parse()?,
            exact: get("exact")? == "true",
            input_count: num("input_count")?,
            kept_count: num("kept_count")?,
            threshold: match fields.get("threshold") {
                Some(t) => Some(t.parse().map_err(|_| CompressorError::CorruptManifest {
                    line: 0,
                    reason: "threshold is not a number".into(),
                })?),
                None => None,
            },
            threshold_pair_id: fields.get("threshold_pair_id").cloned(),
            provenance: ScoreProvenance {
                scorer: get("scorer")?.clone(),
                checkpoint_sha256: fields.get("checkpoint_sha256").cloned(),
            },
            selected,
        };
        if m.selected.len() as u64 != m.kept_count {
            return Err(CompressorError::CorruptManifest {
                line: 0,
                reason: format!(
                    "kept_count {} but {} pair ids listed",
                    m.kept_count,
                    m.selected.len()
                ),
            });
        }
        Ok(m)
    }
}

/// Copies the lines of `listing` whose first tab-separated field is a
/// selected pair id, preserving listing order. Returns the number of lines
/// written. Fails with `MissingPair`, naming the first selected id in
/// manifest order that the listing lacks.
pub fn apply_manifest(
    selected: &[String],
    listing: impl BufRead,
    mut out: impl Write,
) -> Result<usize, CompressorError> {
    let wanted: HashSet<&str> = selected.iter().map(String::as_str).collect();
    let mut found: HashSet<String> = HashSet::with_capacity(wanted.len());
    let mut written = 0;
    for line in listing.lines() {
        let line = line?;
        let id = line.split('\t').next().unwrap_or("");
        if wanted.contains(id) {
            out.write_all(line.as_bytes())?;
            out.write_all(b"\n")?;
            found.insert(id.to_string());
            written += 1;
        }
    }
    if let Some(missing) = selected.iter().find(|id| !found.contains(id.as_str())) {
        return Err(CompressorError::MissingPair {
            pair_id: missing.clone(),
        });
    }
    out.flush()?;
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest() -> CompressedManifest {
        CompressedManifest {
            keep_ratio: "0.5".parse().unwrap(),
            exact: true,
            input_count: 4,
            kept_count: 2,
            threshold: Some(0.1 + 0.2),
            threshold_pair_id: Some("b".into()),
            provenance: ScoreProvenance {
                scorer: "reward-head".into(),
                checkpoint_sha256: Some("00ff".into()),
            },
            selected: vec!["b".into(), "a".into()],
        }
    }

    #[test]
    fn text_round_trip() {
        let m = manifest();
        let text = m.to_text();
        assert!(text.starts_with("# sift-manifest 1\n# keep_ratio 1/2\n"));
        assert_eq!(CompressedManifest::parse(text.as_bytes()).unwrap(), m);
    }

    #[test]
    fn apply_keeps_listing_order() {
        let listing = "a\turl-a\tcap a\nb\turl-b\tcap b\nc\turl-c\tcap c\n";
        let mut out = Vec::new();
        let n = apply_manifest(&manifest().selected, listing.as_bytes(), &mut out).unwrap();
        assert_eq!(n, 2);
        assert_eq!(String::from_utf8(out).unwrap(), "a\turl-a\tcap a\nb\turl-b\tcap b\n");
    }

    #[test]
    fn apply_all_is_identity() {
        let listing = "x\t1\ny\t2\n";
        let mut out = Vec::new();
        apply_manifest(&["x".into(), "y".into()], listing.as_bytes(), &mut out).unwrap();
        assert_eq!(out, listing.as_bytes());
    }

    #[test]
    fn missing_pair_names_first_offender() {
        let err = apply_manifest(
            &["q".into(), "r".into()],
            "x\t1\n".as_bytes(),
            std::io::sink(),
        )
        .unwrap_err();
        assert!(matches!(err, CompressorError::MissingPair { pair_id } if pair_id == "q"));
    }
}
