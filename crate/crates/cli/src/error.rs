use std::io;
use std::path::{Path, PathBuf};

use sift_annotate::ServeError;
use sift_core::compressor::CompressorError;
use sift_core::embedding::EmbeddingError;
use sift_core::evaluator::EvalError;
use sift_core::head::HeadError;
use sift_core::pairgen::PairgenError;
use sift_core::store::StoreError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Pairgen(#[from] PairgenError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error(transparent)]
    Head(#[from] HeadError),
    #[error(transparent)]
    Compressor(#[from] CompressorError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Serve(#[from] ServeError),
}

impl CliError {
    pub fn io(path: &Path, source: io::Error) -> Self {
        CliError::Io {
            path: path.to_owned(),
            source,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "Usage",
            CliError::Config(_) => "InvalidConfig",
            CliError::Io { .. } => "Io",
            CliError::Store(e) => e.name(),
            CliError::Pairgen(e) => e.name(),
            CliError::Embedding(e) => e.name(),
            CliError::Head(e) => e.name(),
            CliError::Compressor(e) => e.name(),
            CliError::Eval(e) => e.name(),
            CliError::Serve(e) => e.name(),
        }
    }

    /// 2 for mistakes in how the tool was invoked, 1 for everything the
    /// data or the environment caused.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_)
            | CliError::Config(_)
            | CliError::Compressor(CompressorError::InvalidKeepRatio(_)) => 2,
            _ => 1,
        }
    }

    /// `error[Name]: message` on one line.
    pub fn line(&self) -> String {
        let name = self.name();
        let msg = self.to_string();
        let msg = msg
            .strip_prefix(name)
            .and_then(|m| m.strip_prefix(": "))
            .unwrap_or(&msg);
        let msg: String = msg
            .chars()
            .map(|c| if c == '\n' || c == '\r' { ' ' } else { c })
            .collect();
        format!("error[{name}]: {msg}")
    }
}
