//! Setting resolution: command-line flag, then the subcommand's section of
//! the TOML config file, then `SIFT_<SECTION>_<KEY>` in the environment,
//! then the built-in default.

use std::path::Path;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::CliError;

pub struct Resolver {
    file: toml::Table,
    section: &'static str,
    /// Every resolved value, recorded for the provenance stamp.
    pub resolved: Map<String, Value>,
}

impl Resolver {
    pub fn new(config: Option<&Path>, section: &'static str) -> Result<Self, CliError> {
        let file = match config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                toml::from_str(&text).map_err(|e| {
                    CliError::Config(format!("{}: {}", p.display(), e.message()))
                })?
            }
            None => toml::Table::new(),
        };
        if let Some(sec) = file.get(section) {
            if !sec.is_table() {
                return Err(CliError::Config(format!("[{section}] must be a table")));
            }
        }
        Ok(Resolver {
            file,
            section,
            resolved: Map::new(),
        })
    }

    pub fn get<T>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T: FromStr + DeserializeOwned + Serialize,
    {
        let v = match flag {
            Some(v) => v,
            None => match self.file_value(key)? {
                Some(v) => v,
                None => self.env_value(key)?.unwrap_or(default),
            },
        };
        self.record(key, &v);
        Ok(v)
    }

    pub fn get_opt<T>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T: FromStr + DeserializeOwned + Serialize,
    {
        let v = match flag {
            Some(v) => Some(v),
            None => match self.file_value(key)? {
                Some(v) => Some(v),
                None => self.env_value(key)?,
            },
        };
        if let Some(v) = &v {
            self.record(key, v);
        }
        Ok(v)
    }

    /// Records a value that is not subject to resolution, e.g. a path.
    pub fn record(&mut self, key: &str, v: &impl Serialize) {
        self.resolved.insert(
            key.to_string(),
            serde_json::to_value(v).expect("settings serialize"),
        );
    }

    fn file_value<T: DeserializeOwned + FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        let Some(v) = self.file.get(self.section).and_then(|s| s.get(key)) else {
            return Ok(None);
        };
        match v.clone().try_into() {
            Ok(t) => Ok(Some(t)),
            Err(e) => {
                // `keep_ratio = 0.5` where a string is expected, a list
                // written as `"768,1024,16"`, and the like.
                let scalar = match v {
                    toml::Value::String(s) => Some(s.clone()),
                    toml::Value::Integer(i) => Some(i.to_string()),
                    toml::Value::Float(f) => Some(f.to_string()),
                    toml::Value::Boolean(b) => Some(b.to_string()),
                    _ => None,
                };
                scalar
                    .and_then(|s| s.parse().ok())
                    .map(Some)
                    .ok_or_else(|| {
                        let e: toml::de::Error = e;
                        CliError::Config(format!("[{}] {key}: {}", self.section, e.message()))
                    })
            }
        }
    }

    fn env_value<T: FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        let name = format!("SIFT_{}_{}", self.section, key)
            .to_ascii_uppercase()
            .replace('-', "_");
        match std::env::var(&name) {
            Ok(v) => v
                .parse()
                .map(Some)
                .map_err(|_| CliError::Config(format!("{name}={v} does not parse"))),
            Err(_) => Ok(None),
        }
    }
}

/// Comma-separated list for flags like `--layer-widths 768,1024,16`.
#[derive(Debug, Clone, PartialEq, serde::Deserialize, Serialize)]
#[serde(transparent)]
pub struct List<T>(pub Vec<T>);

impl<T: FromStr> FromStr for List<T> {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.trim().is_empty() {
            return Ok(List(Vec::new()));
        }
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| format!("bad list element {p:?}")))
            .collect::<Result<_, _>>()
            .map(List)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence_flag_file_env_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[unit]\nalpha = 2\nratio = 0.5\n").unwrap();
        // Only this test touches these variables.
        std::env::set_var("SIFT_UNIT_ALPHA", "3");
        std::env::set_var("SIFT_UNIT_BETA", "4");
        let mut r = Resolver::new(Some(&p), "unit").unwrap();
        assert_eq!(r.get("alpha", Some(1u32), 0).unwrap(), 1);
        assert_eq!(r.get("alpha", None, 0u32).unwrap(), 2);
        assert_eq!(r.get("beta", None, 0u32).unwrap(), 4);
        assert_eq!(r.get("gamma", None, 9u32).unwrap(), 9);
        assert_eq!(r.resolved["gamma"], 9);
        assert_eq!(r.get("ratio", None, String::new()).unwrap(), "0.5");
    }

    #[test]
    fn lists_parse() {
        let l: List<usize> = "768, 1024,16".parse().unwrap();
        assert_eq!(l.0, vec![768, 1024, 16]);
        assert!("1,x".parse::<List<usize>>().is_err());

        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[lists]\narray = [4, 2]\ntext = \"4,2\"\nbad = \"4,z\"\n").unwrap();
        let mut r = Resolver::new(Some(&p), "lists").unwrap();
        assert_eq!(r.get("array", None, List(vec![0usize])).unwrap().0, [4, 2]);
        assert_eq!(r.get("text", None, List(vec![0usize])).unwrap().0, [4, 2]);
        assert!(r.get("bad", None, List(vec![0usize])).is_err());
    }
}
