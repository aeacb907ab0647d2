//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed on-disk data: bad magic, truncation, CRC failure, bad JSON.
    #[error("format error: {0}")]
    Format(String),

    /// A precondition on arguments or configuration was violated.
    #[error("invalid argument: {0}")]
    InvalidArg(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite values where finite ones are required (NaN loss, NaN model output).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// Checkpoint and model/config disagree (e.g. STM on vs off).
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit code for the CLI: 2 usage, 3 data/format, 4 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArg(_) => 2,
            Error::Numerical(_) => 4,
            _ => 3,
        }
    }
}

pub(crate) fn format_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArg(msg.into())
}

pub(crate) fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}
