use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
///
/// The CLI maps [`Error::Io`] to exit code 1 and every other variant to
/// exit code 2 (usage or validation failure).
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("parse error in {path} at `{location}`: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("validation error in {path} at `{location}`: {message}")]
    Validation {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("tensor format error: {0}")]
    Format(String),

    #[error("tensor truncated: expected {expected} payload bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
