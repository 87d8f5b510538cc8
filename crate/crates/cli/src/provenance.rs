//! `<artifact>.provenance.json`: what produced an artifact, by checksum.
//!
//! Stamps carry no timestamps or host details, so reruns with the same
//! inputs and settings write identical stamps.

use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::{Map, Value};
use sift_core::digest;

use crate::error::CliError;

#[derive(Serialize)]
struct FileDigest {
    path: String,
    sha256: String,
}

#[derive(Serialize)]
struct Stamp<'a> {
    tool: &'static str,
    version: &'static str,
    subcommand: &'a str,
    artifact: &'a FileDigest,
    config: &'a Map<String, Value>,
    config_sha256: String,
    inputs: &'a [FileDigest],
    outputs: &'a [FileDigest],
}

pub fn stamp_path(artifact: &Path) -> PathBuf {
    let mut s = artifact.as_os_str().to_owned();
    s.push(".provenance.json");
    PathBuf::from(s)
}

fn digest_of(p: &Path) -> Result<FileDigest, CliError> {
    Ok(FileDigest {
        path: p.display().to_string(),
        sha256: digest::file_sha256_hex(p).map_err(|e| CliError::io(p, e))?,
    })
}

pub fn config_sha256(config: &Map<String, Value>) -> String {
    let canonical = serde_json::to_string(config).expect("config serializes");
    digest::sha256_hex(canonical.as_bytes())
}

/// Writes one stamp next to each output.
pub fn write_stamps(
    subcommand: &str,
    config: &Map<String, Value>,
    inputs: &[&Path],
    outputs: &[&Path],
) -> Result<(), CliError> {
    let input_digests = inputs
        .iter()
        .map(|p| digest_of(p))
        .collect::<Result<Vec<_>, _>>()?;
    let output_digests = outputs
        .iter()
        .map(|p| digest_of(p))
        .collect::<Result<Vec<_>, _>>()?;
    for (i, out) in outputs.iter().enumerate() {
        let stamp = Stamp {
            tool: "sift",
            version: env!("CARGO_PKG_VERSION"),
            subcommand,
            artifact: &output_digests[i],
            config,
            config_sha256: config_sha256(config),
            inputs: &input_digests,
            outputs: &output_digests,
        };
        let mut text = serde_json::to_string_pretty(&stamp).expect("stamp serializes");
        text.push('\n');
        let path = stamp_path(out);
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
    }
    Ok(())
}
