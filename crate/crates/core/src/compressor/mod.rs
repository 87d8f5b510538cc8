//! Corpus scoring and top-fraction selection.

mod manifest;
mod ratio;
mod score;
mod select;
mod table;

use thiserror::Error;

use crate::embedding::EmbeddingError;
use crate::head::HeadError;

pub use manifest::{apply_manifest, CompressedManifest, MANIFEST_HEADER};
pub use ratio::KeepRatio;
pub use score::{score_corpus, score_records, SCORE_CHUNK};
pub use select::{select_top, select_top_approximate, sort_oracle};
pub use table::{ScoreProvenance, ScoreTable};

#[derive(Debug, Error)]
pub enum CompressorError {
    #[error("EmptyTable: nothing to select from")]
    EmptyTable,
    #[error("DuplicatePairId: {0}")]
    DuplicatePairId(String),
    #[error("NonFiniteScore: {pair_id}")]
    NonFiniteScore { pair_id: String },
    #[error("DimensionMismatch: head expects width {expected}, shard {shard} has {found}")]
    DimensionMismatch {
        shard: String,
        expected: usize,
        found: usize,
    },
    #[error("WrongKeyMode: {0} is keyed by caption, corpus shards must be keyed by pair id")]
    WrongKeyMode(String),
    #[error("InvalidKeepRatio: {0}")]
    InvalidKeepRatio(String),
    #[error("MissingPair: {pair_id} is not in the source listing")]
    MissingPair { pair_id: String },
    #[error("CorruptScoreTable: {0}")]
    CorruptScoreTable(String),
    #[error("CorruptManifest: line {line}: {reason}")]
    CorruptManifest { line: usize, reason: String },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error("Io: {0}")]
    Io(#[from] std::io::Error),
}

impl CompressorError {
    pub fn name(&self) -> &'static str {
        match self {
            CompressorError::EmptyTable => "EmptyTable",
            CompressorError::DuplicatePairId(_) => "DuplicatePairId",
            CompressorError::NonFiniteScore { .. } => "NonFiniteScore",
            CompressorError::DimensionMismatch { .. } => "DimensionMismatch",
            CompressorError::WrongKeyMode(_) => "WrongKeyMode",
            CompressorError::InvalidKeepRatio(_) => "InvalidKeepRatio",
            CompressorError::MissingPair { .. } => "MissingPair",
            CompressorError::CorruptScoreTable(_) => "CorruptScoreTable",
            CompressorError::CorruptManifest { .. } => "CorruptManifest",
            CompressorError::Embedding(e) => e.name(),
            CompressorError::Head(e) => e.name(),
            CompressorError::Io(_) => "Io",
        }
    }
}
