//! Checkpoint file.
//!
//! ```text
//! magic      8 bytes  "SIFTCKPT"
//! version    u32 LE
//! header_len u64 LE
//! header     JSON: architecture, training config, update counter,
//!            initialisation scheme, parameter count
//! payload    f64 LE: parameters, then Adam first moments, then second
//!            moments, each in canonical buffer order
//! checksum   u64 LE: first 8 bytes of SHA-256 over everything above
//! ```

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::train::TrainConfig;
use super::{HeadArchitecture, HeadError, HeadParameters, RewardHead};
use crate::digest::truncate_u64;

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"SIFTCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const INIT_SCHEME: &str = "kaiming-uniform-fan-in";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub architecture: HeadArchitecture,
    /// The run's config; its seed also determines all future batches and
    /// dropout masks.
    pub config: TrainConfig,
    pub update: u64,
    pub params: HeadParameters,
    pub adam_m: HeadParameters,
    pub adam_v: HeadParameters,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    architecture: HeadArchitecture,
    config: TrainConfig,
    update: u64,
    init: String,
    parameter_count: usize,
}

impl Checkpoint {
    pub fn head(&self) -> Result<RewardHead, HeadError> {
        RewardHead::new(self.architecture.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            architecture: self.architecture.clone(),
            config: self.config.clone(),
            update: self.update,
            init: INIT_SCHEME.to_string(),
            parameter_count: self.params.parameter_count(),
        };
        let header = serde_json::to_vec(&header).expect("header serializes");
        let n = self.params.parameter_count();
        let mut out = Vec::with_capacity(28 + header.len() + 24 * n + 8);
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for p in [&self.params, &self.adam_m, &self.adam_v] {
            for buf in p.buffers() {
                for v in buf {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let sum = truncate_u64(&Sha256::digest(&out));
        out.extend_from_slice(&sum.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, HeadError> {
        let corrupt = |m: &str| HeadError::CorruptCheckpoint(m.to_string());
        if bytes.len() < 28 || bytes[..8] != CHECKPOINT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(HeadError::CorruptCheckpoint(format!(
                "unsupported version {version}"
            )));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes"));
        let header_end = 20usize
            .checked_add(usize::try_from(header_len).map_err(|_| corrupt("header length"))?)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| corrupt("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| HeadError::CorruptCheckpoint(format!("header: {e}")))?;
        if header.init != INIT_SCHEME {
            return Err(HeadError::CorruptCheckpoint(format!(
                "unknown init scheme {}",
                header.init
            )));
        }
        header.architecture.validate()?;
        let n = header.architecture.parameter_count();
        if n != header.parameter_count {
            return Err(corrupt("parameter count disagrees with architecture"));
        }
        let payload_end = header_end + 24 * n;
        if bytes.len() != payload_end + 8 {
            return Err(corrupt("payload length"));
        }
        let stored = u64::from_le_bytes(bytes[payload_end..].try_into().expect("8 bytes"));
        if stored != truncate_u64(&Sha256::digest(&bytes[..payload_end])) {
            return Err(corrupt("checksum mismatch"));
        }
        let values: Vec<f64> = bytes[header_end..payload_end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let arch = &header.architecture;
        let part = |i: usize| {
            HeadParameters::from_flat(arch, &values[i * n..(i + 1) * n]).expect("length checked")
        };
        let params = part(0);
        if !params.all_finite() {
            return Err(corrupt("non-finite parameter"));
        }
        Ok(Checkpoint {
            params,
            adam_m: part(1),
            adam_v: part(2),
            architecture: header.architecture,
            config: header.config,
            update: header.update,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<(), HeadError> {
    let path = path.as_ref();
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&ckpt.to_bytes())?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| HeadError::Io(e.error))?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, HeadError> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint that must match `expected`.
pub fn load_checkpoint_for(
    path: impl AsRef<Path>,
    expected: &HeadArchitecture,
) -> Result<Checkpoint, HeadError> {
    let ckpt = load_checkpoint(path)?;
    if &ckpt.architecture != expected {
        return Err(HeadError::IncompatibleArchitecture {
            expected: expected.describe(),
            found: ckpt.architecture.describe(),
        });
    }
    Ok(ckpt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::train::Trainer;

    fn small() -> Checkpoint {
        let arch = HeadArchitecture {
            layer_widths: vec![6, 5, 3],
            dropout_rates: vec![0.2],
            activation: Default::default(),
        };
        let cfg = TrainConfig {
            seed: 11,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        Trainer::new(arch, cfg).unwrap().checkpoint()
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        let ck = small();
        save_checkpoint(&ck, &a).unwrap();
        let back = load_checkpoint(&a).unwrap();
        assert_eq!(back, ck);
        save_checkpoint(&back, &b).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn mismatched_architecture() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.ckpt");
        save_checkpoint(&small(), &a).unwrap();
        let other = HeadArchitecture::default_for_input(6);
        assert!(matches!(
            load_checkpoint_for(&a, &other),
            Err(HeadError::IncompatibleArchitecture { .. })
        ));
    }

    #[test]
    fn corruption_detected() {
        let mut bytes = small().to_bytes();
        let n = bytes.len();
        bytes[n - 20] ^= 1;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(HeadError::CorruptCheckpoint(_))
        ));
        assert!(Checkpoint::from_bytes(&bytes[..n - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"nonsense").is_err());
    }
}
