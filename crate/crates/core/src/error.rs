use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("dimension mismatch: {what} (expected {expected}, found {found})")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("index {index} out of range (total {total})")]
    OutOfRange { index: usize, total: usize },

    #[error("integer overflow while computing {0}")]
    Overflow(&'static str),

    #[error("budget exceeded: {what} needs {required}, cap is {cap}")]
    Budget {
        what: &'static str,
        required: u128,
        cap: u128,
    },

    #[error("config error in `{field}`: {message}")]
    Config { field: String, message: String },

    #[error("corrupt Q-table file: {0}")]
    Corrupt(String),

    #[error("unsupported Q-table version tag {0:?}")]
    Version(String),

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

    pub(crate) fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
