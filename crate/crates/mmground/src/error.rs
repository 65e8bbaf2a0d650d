//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid config: {0}")]
    Config(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("word not in vocabulary: {0:?}")]
    OutOfVocab(String),

    #[error("token id {0} out of range (vocab size {1})")]
    TokenIdRange(usize, usize),

    #[error("malformed output: {0}")]
    Malformed(#[from] crate::protocol::MalformedOutput),

    #[error("dataset format error at record {index}: {message}")]
    DatasetFormat { index: usize, message: String },

    #[error("tensor blob error: {0}")]
    Blob(String),

    #[error("non-finite {term} loss at step {step}")]
    NonFiniteLoss { term: String, step: usize },

    #[error("empty batch")]
    EmptyBatch,

    #[error("sequence length {got} exceeds maximum {max}")]
    SequenceTooLong { got: usize, max: usize },

    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
