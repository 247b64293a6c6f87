use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the simulation stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("zero vector: {0}")]
    ZeroVector(&'static str),

    #[error("all aggregation weights are zero")]
    ZeroWeights,

    #[error("partition failed after {attempts} attempts: {reason}")]
    Partition { attempts: usize, reason: String },

    #[error("dataset error at {path}: {reason}")]
    Dataset { path: PathBuf, reason: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
