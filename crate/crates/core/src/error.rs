use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("forward cache does not belong to this network")]
    StaleCache,

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("shadow {index}: {source}")]
    Shadow {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("insufficient samples for user {user}: need {needed}, have {available}")]
    InsufficientSamples {
        user: String,
        needed: usize,
        available: usize,
    },

    #[error("sizing error: {0}")]
    Sizing(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("degenerate batch: {0}")]
    DegenerateBatch(String),

    #[error("degenerate similarity: zero-norm embedding")]
    ZeroNorm,

    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("{0}")]
    Evaluation(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
