use std::path::PathBuf;

use hatemask_nn::NnError;
use thiserror::Error;

use crate::corpus::CorpusError;
use crate::metrics::MetricsError;
use crate::text::TextError;

/// Errors from building, training, evaluating and persisting models.
#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),
    #[error("invalid configuration: {}", .0.join("; "))]
    InvalidConfig(Vec<String>),
    #[error("input of length {len} is shorter than the kernel size {needed}")]
    InputTooShort { len: usize, needed: usize },
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("no parallel pairs given")]
    EmptyPairList,
    #[error("embedding file has dimension {found}, expected {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),
    #[error("malformed {what}: {message}")]
    Format { what: &'static str, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;
