//! Error type shared by every module of the toolkit.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("sequence length {len} outside [1, {max}]{}", context.as_deref().map(|c| format!(" ({c})")).unwrap_or_default())]
    SequenceLength {
        len: usize,
        max: usize,
        context: Option<String>,
    },

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("sampling error: {0}")]
    Sampling(String),

    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("{count} item(s) failed:\n{}", failures.join("\n"))]
    Failures { count: usize, failures: Vec<String> },

    #[error("i/o error on {path}: {source}")]
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

    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
