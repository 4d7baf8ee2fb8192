//! Crate-wide error type.

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors surfaced by the compression engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated an operation's contract.
    #[error("contract violation: {0}")]
    Contract(String),
    /// An iterative kernel failed to converge.
    #[error("numerical failure: {0}")]
    Numerical(String),
    /// Stored data is internally inconsistent.
    #[error("data integrity: {0}")]
    DataIntegrity(String),
    /// Invalid or infeasible run configuration.
    #[error("configuration error: {0}")]
    Config(String),
    /// Malformed cache or query file.
    #[error("format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    /// Problem instance exceeds a hard solver limit.
    #[error("instance too large: {0}")]
    TooLarge(String),
    /// I/O failure, with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, reason: impl Into<String>) -> Self {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
