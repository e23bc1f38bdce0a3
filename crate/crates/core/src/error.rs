//! Crate-wide error type.

use thiserror::Error;

/// Errors surfaced by the pipeline and its building blocks.
#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid event: {0}")]
    InvalidEvent(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("config error at `{field}`: {msg}")]
    Config { field: String, msg: String },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("missing artifact {path}; run `{stage}` first")]
    MissingArtifact { path: String, stage: String },

    #[error("artifact {path} was produced by a different config (hash {found:#018x}, expected {expected:#018x})")]
    ConfigHashMismatch {
        path: String,
        found: u64,
        expected: u64,
    },

    #[error("label leakage: {0}")]
    Leakage(String),

    #[error("corrupt file {path}: {msg}")]
    CorruptFile { path: String, msg: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
