use std::io;
use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the library.
///
/// `Invalid` marks caller mistakes (bad configuration, out-of-range
/// arguments); front ends map it to a usage-style exit code.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid {field}: {reason}")]
    Invalid { field: &'static str, reason: String },

    #[error("empty corpus: {0}")]
    EmptyCorpus(String),

    #[error("token id {id} out of range for vocabulary of size {size}")]
    TokenOutOfRange { id: usize, size: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("zero-norm classifier column {0} cannot be tau-normalized")]
    ZeroNorm(usize),

    #[error("vocabulary hash mismatch: expected {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("missing {0}")]
    Missing(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("config: {0}")]
    Toml(#[from] toml::de::Error),
}

impl Error {
    pub(crate) fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Invalid {
            field,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's input rather than a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            Error::Invalid { .. } | Error::Toml(_) | Error::Missing(_) | Error::VocabMismatch { .. }
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
