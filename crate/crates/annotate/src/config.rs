use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("InvalidConfig: {0}")]
    Invalid(String),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
}

/// Service settings. Sources, lowest precedence first: defaults,
/// `SIFT_ANNOTATE_*` environment variables, a TOML file, then explicit
/// overrides by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    pub port: u16,
    pub store_path: PathBuf,
    pub lease_ttl_secs: u64,
    /// Distinct labelers wanted per image.
    pub replication: usize,
    /// Mixed into every task's caption shuffle.
    pub shuffle_seed: u64,
    /// Labelers registered at startup.
    pub labelers: Vec<String>,
    /// Static frontend assets served at `/`.
    pub ui_dir: Option<PathBuf>,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            bind: "127.0.0.1".into(),
            port: 8080,
            store_path: PathBuf::from("preferences.log"),
            lease_ttl_secs: 30 * 60,
            replication: 1,
            shuffle_seed: 0,
            labelers: Vec::new(),
            ui_dir: None,
        }
    }
}

impl ServiceConfig {
    pub fn from_env() -> Result<Self, ConfigError> {
        let mut c = ServiceConfig::default();
        c.apply_env()?;
        Ok(c)
    }

    pub fn apply_env(&mut self) -> Result<(), ConfigError> {
        fn parse<T: std::str::FromStr>(name: &str, v: &str) -> Result<T, ConfigError> {
            v.parse()
                .map_err(|_| ConfigError::Invalid(format!("{name}={v}")))
        }
        for (name, v) in std::env::vars().filter(|(k, _)| k.starts_with("SIFT_ANNOTATE_")) {
            match name.as_str() {
                "SIFT_ANNOTATE_BIND" => self.bind = v,
                "SIFT_ANNOTATE_PORT" => self.port = parse(&name, &v)?,
                "SIFT_ANNOTATE_STORE" => self.store_path = v.into(),
                "SIFT_ANNOTATE_LEASE_TTL_SECS" => self.lease_ttl_secs = parse(&name, &v)?,
                "SIFT_ANNOTATE_REPLICATION" => self.replication = parse(&name, &v)?,
                "SIFT_ANNOTATE_SHUFFLE_SEED" => self.shuffle_seed = parse(&name, &v)?,
                "SIFT_ANNOTATE_LABELERS" => {
                    self.labelers = v.split(',').filter(|s| !s.is_empty()).map(String::from).collect()
                }
                "SIFT_ANNOTATE_UI_DIR" => self.ui_dir = Some(v.into()),
                _ => {}
            }
        }
        Ok(())
    }

    /// Overlays the keys present in a TOML file.
    pub fn apply_toml_file(&mut self, path: impl AsRef<Path>) -> Result<(), ConfigError> {
        let text = std::fs::read_to_string(path)?;
        let table: toml::Table =
            toml::from_str(&text).map_err(|e| ConfigError::Invalid(e.to_string()))?;
        let invalid = |e: &dyn std::fmt::Display| ConfigError::Invalid(e.to_string());
        let mut merged = toml::Value::try_from(&*self).map_err(|e| invalid(&e))?;
        let slots = merged.as_table_mut().expect("config serializes to a table");
        for (k, v) in table {
            slots.insert(k, v);
        }
        *self = merged.try_into().map_err(|e| invalid(&e))?;
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.lease_ttl_secs == 0 {
            return Err(ConfigError::Invalid("lease_ttl_secs must be >= 1".into()));
        }
        if self.replication == 0 {
            return Err(ConfigError::Invalid("replication must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_overlays_only_given_keys() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("svc.toml");
        std::fs::write(&p, "port = 9000\nlabelers = [\"ann\", \"bo\"]\n").unwrap();
        let mut c = ServiceConfig {
            replication: 3,
            ..ServiceConfig::default()
        };
        c.apply_toml_file(&p).unwrap();
        assert_eq!(c.port, 9000);
        assert_eq!(c.replication, 3);
        assert_eq!(c.labelers, ["ann", "bo"]);
        assert_eq!(c.lease_ttl_secs, 1800);
    }

    #[test]
    fn unknown_key_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("svc.toml");
        std::fs::write(&p, "prot = 9000\n").unwrap();
        assert!(ServiceConfig::default().apply_toml_file(&p).is_err());
    }
}
