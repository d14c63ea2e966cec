use std::path::PathBuf;

use thiserror::Error;

/// Errors raised by the planning stack.
#[derive(Debug, Error)]
pub enum Error {
    #[error("value {value} outside codebook range [{min}, {max}]")]
    OutOfRange { value: f64, min: f64, max: f64 },

    #[error("non-finite input: {0}")]
    NonFinite(f64),

    #[error("token id {id} outside alphabet of size {size}")]
    InvalidToken { id: usize, size: usize },

    #[error("invalid codebook: {0}")]
    InvalidCodebook(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("embedding_l2 metric requires an embedding table")]
    MissingEmbeddingTable,

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("distribution is not normalized (sum = {0})")]
    Unnormalized(f64),

    #[error("malformed polygon: {0}")]
    MalformedPolygon(String),

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: usize, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("stage order violation: {0}")]
    StageOrder(String),

    #[error("bad checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },

    #[error("{path}:{line}: {reason}")]
    Schema {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by bad inputs or configuration rather than a
    /// failure while running.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::OutOfRange { .. }
                | Error::NonFinite(_)
                | Error::InvalidToken { .. }
                | Error::InvalidCodebook(_)
                | Error::InvalidArgument(_)
                | Error::MissingEmbeddingTable
                | Error::DimensionMismatch(_)
                | Error::Unnormalized(_)
                | Error::MalformedPolygon(_)
                | Error::Config(_)
                | Error::StageOrder(_)
                | Error::Schema { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
