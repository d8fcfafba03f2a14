use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the grounding pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("failed to load {path}: {reason}")]
    Load { path: PathBuf, reason: String },

    #[error("schema violation in record `{record}`: {reason}")]
    Schema { record: String, reason: String },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape error: {0}")]
    Shape(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("integrity check failed for parameter `{param}`: {reason}")]
    Integrity { param: String, reason: String },

    #[error("non-finite loss at epoch {epoch}, batch {batch}: {terms}")]
    NonFinite { epoch: usize, batch: usize, terms: String },

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn schema(record: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Schema {
            record: record.into(),
            reason: reason.into(),
        }
    }
}
