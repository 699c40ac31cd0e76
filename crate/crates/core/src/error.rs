use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("sidecar {path}: {reason}")]
    Sidecar { path: PathBuf, reason: String },

    #[error("unknown dtype {0:?} (expected uint8, uint16 or float32)")]
    UnknownDtype(String),

    #[error("size mismatch: expected {expected} bytes, found {actual}")]
    SizeMismatch { expected: u64, actual: u64 },

    #[error("invalid volume: {0}")]
    InvalidVolume(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("scale factor must be at least 2, got {0}")]
    InvalidFactor(usize),

    #[error("invalid config key `{key}`: {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("malformed file: {0}")]
    Format(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("batch index {index} out of range for epoch {epoch} ({batches} batches)")]
    BatchOutOfRange {
        epoch: usize,
        index: usize,
        batches: usize,
    },

    #[error("non-finite loss {loss} at epoch {epoch}, iteration {iteration}")]
    NonFiniteLoss {
        epoch: usize,
        iteration: usize,
        loss: f64,
    },

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("CSV error: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn config(key: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::InvalidConfig {
            key: key.into(),
            reason: reason.into(),
        }
    }
}
