use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("shape mismatch: expected {expected}, got {actual}")]
    Shape { expected: usize, actual: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("non-finite value at coordinate {coordinate}: {detail}")]
    Numeric { coordinate: usize, detail: String },

    #[error("index {index} out of range for table with {len} records")]
    Bounds { index: u64, len: u64 },

    #[error("format error: {0}")]
    Format(String),

    #[error("invalid crop: {0}")]
    InvalidCrop(String),

    #[error("correctness failure: {0}")]
    Correctness(String),

    #[error("I/O error on {path}: {source}")]
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

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    /// True for errors caused by bad user input rather than the environment.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Config(_) | Error::Shape { .. } | Error::InvalidInput(_) | Error::InvalidCrop(_)
        )
    }
}
