use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = TceError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum TceError {
    #[error("zero-norm vector has no direction")]
    ZeroNorm,

    #[error("vector norm {norm:e} is below the degenerate threshold")]
    DegenerateVector { norm: f64 },

    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("unknown memory bank key {0}")]
    UnknownKey(usize),

    #[error("insufficient negatives: requested {requested}, only {available} eligible")]
    InsufficientNegatives { requested: usize, available: usize },

    #[error("degenerate segment: consecutive embeddings coincide")]
    DegenerateSegment,

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("checkpoint checksum mismatch (stored {stored:#018x}, computed {computed:#018x})")]
    Checksum { stored: u64, computed: u64 },

    #[error("unsupported checkpoint version byte {0:#04x}")]
    Version(u8),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl TceError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        TceError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn arg(msg: impl Into<String>) -> Self {
        TceError::InvalidArgument(msg.into())
    }
}
