use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("line {line}: token id {token} out of range for vocab size {vocab_size}")]
    TokenOutOfRange {
        line: usize,
        token: u64,
        vocab_size: u32,
    },

    #[error("line {line}: chosen and rejected responses are identical")]
    DuplicatePair { line: usize },

    #[error("support violation: {0}")]
    Support(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("divergence at step {step}: {message}")]
    Diverged { step: usize, message: String },

    #[error("{context}: {source}")]
    Io {
        context: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{context}: {source}")]
    Json {
        context: String,
        #[source]
        source: serde_json::Error,
    },

    #[error("unsupported format version {found} (expected {expected})")]
    FormatVersion { found: u32, expected: u32 },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            context: path.into(),
            source,
        }
    }
}
