//! Fused image-text embeddings: the frozen backbone's output, consumed as
//! plain input by the reward head.
//!
//! Two on-disk forms are supported: the binary shard (see [`shard`]) and a
//! JSON-lines variant for small files. [`open_embeddings`] picks the right
//! reader from the file's leading bytes.

pub mod client;
pub mod jsonl;
pub mod shard;

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{self, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use client::{fetch_embeddings, ClientConfig};
pub use shard::{write_shard, ShardHeader, ShardReader, ShardSummary, ShardWriter, SHARD_MAGIC};

/// Default fused embedding width.
pub const DEFAULT_DIMENSION: usize = 768;

#[derive(Debug, Error)]
pub enum EmbeddingError {
    #[error("BadMagic: {0}")]
    BadMagic(String),
    #[error("UnsupportedVersion: shard format version {0}")]
    UnsupportedVersion(u32),
    #[error("DimensionMismatch: {key}: expected {expected}, found {found}")]
    DimensionMismatch {
        key: String,
        expected: usize,
        found: usize,
    },
    #[error("TruncatedShard: data ends inside the element starting at byte offset {offset}")]
    TruncatedShard { offset: u64 },
    #[error("NonFiniteVector: {key}")]
    NonFiniteVector { key: String },
    #[error("DuplicateKey: {0}")]
    DuplicateKey(String),
    #[error("MixedKeyModes: {0} does not match the shard's key mode")]
    MixedKeyModes(String),
    #[error("ChecksumMismatch: stored {stored:016x}, computed {computed:016x}")]
    ChecksumMismatch { stored: u64, computed: u64 },
    #[error("CorruptShard: {0}")]
    CorruptShard(String),
    #[error("TooManyTextRecords: JSON-lines embeddings are limited to {limit} records")]
    TooManyTextRecords { limit: usize },
    #[error("EmptyKeys: at least one key is required")]
    EmptyKeys,
    #[error("EndpointUnreachable: {endpoint} after {attempts} attempts: {last_error}")]
    EndpointUnreachable {
        endpoint: String,
        attempts: u32,
        last_error: String,
    },
    #[error("EndpointRejected: {endpoint} answered {status}: {body}")]
    EndpointRejected {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("MalformedResponse: {0}")]
    MalformedResponse(String),
    #[error("PartialResponse: missing {} keys: {}", missing.len(), missing.join(", "))]
    PartialResponse { missing: Vec<String> },
    #[error("MissingEmbedding: {0}")]
    MissingEmbedding(String),
    #[error("InvalidConfig: {0}")]
    InvalidConfig(String),
    #[error("Io: {0}")]
    Io(#[from] io::Error),
}

impl EmbeddingError {
    pub fn name(&self) -> &'static str {
        match self {
            EmbeddingError::BadMagic(_) => "BadMagic",
            EmbeddingError::UnsupportedVersion(_) => "UnsupportedVersion",
            EmbeddingError::DimensionMismatch { .. } => "DimensionMismatch",
            EmbeddingError::TruncatedShard { .. } => "TruncatedShard",
            EmbeddingError::NonFiniteVector { .. } => "NonFiniteVector",
            EmbeddingError::DuplicateKey(_) => "DuplicateKey",
            EmbeddingError::MixedKeyModes(_) => "MixedKeyModes",
            EmbeddingError::ChecksumMismatch { .. } => "ChecksumMismatch",
            EmbeddingError::CorruptShard(_) => "CorruptShard",
            EmbeddingError::TooManyTextRecords { .. } => "TooManyTextRecords",
            EmbeddingError::EmptyKeys => "EmptyKeys",
            EmbeddingError::EndpointUnreachable { .. } => "EndpointUnreachable",
            EmbeddingError::EndpointRejected { .. } => "EndpointRejected",
            EmbeddingError::MalformedResponse(_) => "MalformedResponse",
            EmbeddingError::PartialResponse { .. } => "PartialResponse",
            EmbeddingError::MissingEmbedding(_) => "MissingEmbedding",
            EmbeddingError::InvalidConfig(_) => "InvalidConfig",
            EmbeddingError::Io(_) => "Io",
        }
    }
}

/// How a shard identifies its records.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KeyMode {
    /// Corpus records, keyed by an opaque pair id.
    PairId,
    /// Preference-training records, keyed by `(image_id, caption_id)`.
    Caption,
}

impl KeyMode {
    pub(crate) fn to_byte(self) -> u8 {
        match self {
            KeyMode::PairId => 0,
            KeyMode::Caption => 1,
        }
    }

    pub(crate) fn from_byte(b: u8) -> Option<Self> {
        match b {
            0 => Some(KeyMode::PairId),
            1 => Some(KeyMode::Caption),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EmbeddingKey {
    Caption { image_id: String, caption_id: String },
    Pair { pair_id: String },
}

impl EmbeddingKey {
    pub fn pair(id: impl Into<String>) -> Self {
        EmbeddingKey::Pair { pair_id: id.into() }
    }

    pub fn caption(image_id: impl Into<String>, caption_id: impl Into<String>) -> Self {
        EmbeddingKey::Caption {
            image_id: image_id.into(),
            caption_id: caption_id.into(),
        }
    }

    pub fn mode(&self) -> KeyMode {
        match self {
            EmbeddingKey::Pair { .. } => KeyMode::PairId,
            EmbeddingKey::Caption { .. } => KeyMode::Caption,
        }
    }

    /// The pair id, for corpus-mode keys.
    pub fn pair_id(&self) -> Option<&str> {
        match self {
            EmbeddingKey::Pair { pair_id } => Some(pair_id),
            EmbeddingKey::Caption { .. } => None,
        }
    }
}

impl fmt::Display for EmbeddingKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbeddingKey::Pair { pair_id } => f.write_str(pair_id),
            EmbeddingKey::Caption {
                image_id,
                caption_id,
            } => write!(f, "{image_id}/{caption_id}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub key: EmbeddingKey,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn new(key: EmbeddingKey, vector: Vec<f32>) -> Self {
        EmbeddingRecord { key, vector }
    }

    pub fn check(&self, dimension: usize) -> Result<(), EmbeddingError> {
        if self.vector.len() != dimension {
            return Err(EmbeddingError::DimensionMismatch {
                key: self.key.to_string(),
                expected: dimension,
                found: self.vector.len(),
            });
        }
        if !self.vector.iter().all(|v| v.is_finite()) {
            return Err(EmbeddingError::NonFiniteVector {
                key: self.key.to_string(),
            });
        }
        Ok(())
    }
}

/// Streaming reader over either on-disk form.
pub enum EmbeddingReader {
    Binary(Box<ShardReader>),
    Text(jsonl::JsonlReader),
}

impl EmbeddingReader {
    pub fn dimension(&self) -> Option<usize> {
        match self {
            EmbeddingReader::Binary(r) => Some(r.header().dimension),
            EmbeddingReader::Text(r) => r.dimension(),
        }
    }

    pub fn record_count(&self) -> usize {
        match self {
            EmbeddingReader::Binary(r) => r.header().count as usize,
            EmbeddingReader::Text(r) => r.len(),
        }
    }
}

impl Iterator for EmbeddingReader {
    type Item = Result<EmbeddingRecord, EmbeddingError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self {
            EmbeddingReader::Binary(r) => r.next(),
            EmbeddingReader::Text(r) => r.next(),
        }
    }
}

/// Opens a binary shard or a JSON-lines embedding file, detected by magic.
pub fn open_embeddings(path: impl AsRef<Path>) -> Result<EmbeddingReader, EmbeddingError> {
    let path = path.as_ref();
    let mut magic = [0u8; 8];
    let mut f = File::open(path)?;
    let n = read_up_to(&mut f, &mut magic)?;
    if n == magic.len() && magic == SHARD_MAGIC {
        Ok(EmbeddingReader::Binary(Box::new(ShardReader::open(path)?)))
    } else {
        Ok(EmbeddingReader::Text(jsonl::JsonlReader::open(path)?))
    }
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        let n = r.read(&mut buf[filled..])?;
        if n == 0 {
            break;
        }
        filled += n;
    }
    Ok(filled)
}

/// All embeddings of one or more files, held in memory by key.
#[derive(Debug, Clone, Default)]
pub struct EmbeddingTable {
    dimension: Option<usize>,
    vectors: HashMap<EmbeddingKey, Vec<f32>>,
}

impl EmbeddingTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_records(
        records: impl IntoIterator<Item = EmbeddingRecord>,
    ) -> Result<Self, EmbeddingError> {
        let mut t = Self::new();
        for r in records {
            t.insert(r)?;
        }
        Ok(t)
    }

    pub fn load(paths: &[impl AsRef<Path>]) -> Result<Self, EmbeddingError> {
        let mut t = Self::new();
        for p in paths {
            for r in open_embeddings(p)? {
                t.insert(r?)?;
            }
        }
        Ok(t)
    }

    pub fn insert(&mut self, record: EmbeddingRecord) -> Result<(), EmbeddingError> {
        let dim = *self.dimension.get_or_insert(record.vector.len());
        record.check(dim)?;
        if self.vectors.contains_key(&record.key) {
            return Err(EmbeddingError::DuplicateKey(record.key.to_string()));
        }
        self.vectors.insert(record.key, record.vector);
        Ok(())
    }

    pub fn dimension(&self) -> Option<usize> {
        self.dimension
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, key: &EmbeddingKey) -> Option<&[f32]> {
        self.vectors.get(key).map(Vec::as_slice)
    }

    pub fn caption(&self, image_id: &str, caption_id: &str) -> Option<&[f32]> {
        self.get(&EmbeddingKey::caption(image_id, caption_id))
    }
}
