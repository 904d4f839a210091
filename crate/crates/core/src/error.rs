//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the library.
///
/// The CLI maps these onto exit codes: validation/format/config errors
/// exit with 2, numerical failures with 3.
#[derive(Debug, Error)]
pub enum Error {
    /// Input data violated a documented precondition or invariant.
    #[error("validation error: {0}")]
    Validation(String),

    /// A configuration file or CLI flag combination is invalid.
    #[error("config error: {0}")]
    Config(String),

    /// A binary or JSON artifact on disk is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// A numerical routine failed (factorization breakdown, NaN/Inf).
    #[error("numerical error: {0}")]
    Numerical(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn validation(msg: impl Into<String>) -> Self {
        Error::Validation(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    /// Process exit code for the CLI contract (2 = config/validation, 3 = numerical).
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numerical(_) => 3,
            _ => 2,
        }
    }
}
