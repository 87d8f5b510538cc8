//! Client for an external embedder service that runs the frozen backbone.
//!
//! Wire protocol (JSON over HTTP POST to `endpoint`):
//!
//! ```text
//! request:  {"schema_version": 1, "keys": [{"pair_id": "..."} | {"image_id": "...", "caption_id": "..."}]}
//! response: {"schema_version": 1, "dimension": d, "embeddings": [{"key": <key>, "vector": [f32; d]}]}
//! ```
//!
//! Keys are sent in batches of `batch_size`. Connection failures, timeouts,
//! 429 and 5xx responses are retried with capped exponential backoff.

use std::collections::HashMap;
use std::path::Path;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EmbeddingError, EmbeddingKey, EmbeddingRecord};

pub const WIRE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub endpoint: String,
    pub batch_size: usize,
    /// Dimension the caller needs; responses advertising another are rejected.
    pub expected_dimension: Option<usize>,
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub max_backoff_ms: u64,
    pub timeout_secs: u64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        ClientConfig {
            endpoint: String::new(),
            batch_size: 256,
            expected_dimension: None,
            max_retries: 4,
            initial_backoff_ms: 100,
            max_backoff_ms: 5_000,
            timeout_secs: 60,
        }
    }
}

impl ClientConfig {
    pub fn from_toml_file(path: impl AsRef<Path>) -> Result<Self, EmbeddingError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| EmbeddingError::InvalidConfig(e.to_string()))
    }

    /// Applies `SIFT_EMBEDDER_*` environment overrides.
    pub fn with_env(mut self) -> Result<Self, EmbeddingError> {
        fn parse<T: std::str::FromStr>(name: &str) -> Result<Option<T>, EmbeddingError> {
            match std::env::var(name) {
                Ok(v) => v
                    .parse()
                    .map(Some)
                    .map_err(|_| EmbeddingError::InvalidConfig(format!("{name}={v}"))),
                Err(_) => Ok(None),
            }
        }
        if let Ok(v) = std::env::var("SIFT_EMBEDDER_ENDPOINT") {
            self.endpoint = v;
        }
        if let Some(v) = parse("SIFT_EMBEDDER_BATCH_SIZE")? {
            self.batch_size = v;
        }
        if let Some(v) = parse("SIFT_EMBEDDER_DIMENSION")? {
            self.expected_dimension = Some(v);
        }
        if let Some(v) = parse("SIFT_EMBEDDER_MAX_RETRIES")? {
            self.max_retries = v;
        }
        Ok(self)
    }

    fn validate(&self) -> Result<(), EmbeddingError> {
        if self.endpoint.is_empty() {
            return Err(EmbeddingError::InvalidConfig("endpoint is not set".into()));
        }
        if self.batch_size == 0 {
            return Err(EmbeddingError::InvalidConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    fn backoff(&self, attempt: u32) -> Duration {
        let ms = self
            .initial_backoff_ms
            .saturating_mul(1u64 << attempt.min(20))
            .min(self.max_backoff_ms);
        Duration::from_millis(ms)
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedRequest {
    pub schema_version: u32,
    pub keys: Vec<EmbeddingKey>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct EmbedResponse {
    pub schema_version: u32,
    pub dimension: usize,
    pub embeddings: Vec<WireEmbedding>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WireEmbedding {
    pub key: EmbeddingKey,
    pub vector: Vec<f32>,
}

enum Attempt {
    Retry(String),
    Fatal(EmbeddingError),
}

/// Fetches one embedding per key, returned in key order.
pub fn fetch_embeddings(
    config: &ClientConfig,
    keys: &[EmbeddingKey],
) -> Result<Vec<EmbeddingRecord>, EmbeddingError> {
    if keys.is_empty() {
        return Err(EmbeddingError::EmptyKeys);
    }
    config.validate()?;
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_secs(config.timeout_secs))
        .build()
        .map_err(|e| EmbeddingError::InvalidConfig(e.to_string()))?;

    let mut out = Vec::with_capacity(keys.len());
    let mut dimension: Option<usize> = config.expected_dimension;
    for batch in keys.chunks(config.batch_size) {
        let response = post_with_retry(&client, config, batch)?;
        if response.schema_version != WIRE_VERSION {
            return Err(EmbeddingError::MalformedResponse(format!(
                "schema version {}, expected {WIRE_VERSION}",
                response.schema_version
            )));
        }
        let dim = *dimension.get_or_insert(response.dimension);
        if response.dimension != dim {
            return Err(EmbeddingError::DimensionMismatch {
                key: config.endpoint.clone(),
                expected: dim,
                found: response.dimension,
            });
        }
        let mut by_key: HashMap<EmbeddingKey, Vec<f32>> = response
            .embeddings
            .into_iter()
            .map(|e| (e.key, e.vector))
            .collect();
        let missing: Vec<String> = batch
            .iter()
            .filter(|k| !by_key.contains_key(k))
            .map(|k| k.to_string())
            .collect();
        if !missing.is_empty() {
            return Err(EmbeddingError::PartialResponse { missing });
        }
        for key in batch {
            let vector = by_key.remove(key).expect("presence checked above");
            let rec = EmbeddingRecord::new(key.clone(), vector);
            rec.check(dim)?;
            out.push(rec);
        }
    }
    Ok(out)
}

fn post_with_retry(
    client: &reqwest::blocking::Client,
    config: &ClientConfig,
    batch: &[EmbeddingKey],
) -> Result<EmbedResponse, EmbeddingError> {
    let body = EmbedRequest {
        schema_version: WIRE_VERSION,
        keys: batch.to_vec(),
    };
    let mut last_error = String::new();
    let attempts = config.max_retries + 1;
    for attempt in 0..attempts {
        if attempt > 0 {
            thread::sleep(config.backoff(attempt - 1));
        }
        match post_once(client, config, &body) {
            Ok(r) => return Ok(r),
            Err(Attempt::Fatal(e)) => return Err(e),
            Err(Attempt::Retry(msg)) => {
                tracing::warn!(endpoint = %config.endpoint, attempt, "embedder request failed: {msg}");
                last_error = msg;
            }
        }
    }
    Err(EmbeddingError::EndpointUnreachable {
        endpoint: config.endpoint.clone(),
        attempts,
        last_error,
    })
}

fn post_once(
    client: &reqwest::blocking::Client,
    config: &ClientConfig,
    body: &EmbedRequest,
) -> Result<EmbedResponse, Attempt> {
    let resp = client
        .post(&config.endpoint)
        .json(body)
        .send()
        .map_err(|e| Attempt::Retry(e.to_string()))?;
    let status = resp.status();
    if status.is_server_error() || status.as_u16() == 429 {
        return Err(Attempt::Retry(format!("HTTP {status}")));
    }
    if !status.is_success() {
        let text = resp.text().unwrap_or_default();
        return Err(Attempt::Fatal(EmbeddingError::EndpointRejected {
            endpoint: config.endpoint.clone(),
            status: status.as_u16(),
            body: text,
        }));
    }
    resp.json::<EmbedResponse>()
        .map_err(|e| Attempt::Fatal(EmbeddingError::MalformedResponse(e.to_string())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn backoff_is_capped() {
        let c = ClientConfig {
            initial_backoff_ms: 100,
            max_backoff_ms: 1_000,
            ..ClientConfig::default()
        };
        assert_eq!(c.backoff(0), Duration::from_millis(100));
        assert_eq!(c.backoff(2), Duration::from_millis(400));
        assert_eq!(c.backoff(10), Duration::from_millis(1_000));
    }

    #[test]
    fn empty_keys_rejected_before_network() {
        let c = ClientConfig {
            endpoint: "http://127.0.0.1:9/".into(),
            ..ClientConfig::default()
        };
        assert!(matches!(
            fetch_embeddings(&c, &[]),
            Err(EmbeddingError::EmptyKeys)
        ));
    }

    #[test]
    fn toml_config() {
        let c: ClientConfig = toml::from_str(
            "endpoint = \"http://localhost:8080/embed\"\nbatch_size = 32\nexpected_dimension = 768\n",
        )
        .unwrap();
        assert_eq!(c.batch_size, 32);
        assert_eq!(c.expected_dimension, Some(768));
        assert_eq!(c.max_retries, 4);
    }
}
