//! Crate-wide error type, with a fixed mapping onto process exit codes.

use std::io;

/// Everything that can go wrong in the toolkit.
///
/// The variants are grouped by how the command-line tool reports them:
/// bad parameters exit with 2, malformed files and I/O failures with 3,
/// and numeric blow-ups (non-finite values) with 4.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Caller passed an argument that violates a documented precondition.
    #[error("invalid parameter: {0}")]
    Parameter(String),
    /// A file exists and is readable but its contents are malformed.
    #[error("format error: {0}")]
    Format(String),
    /// The underlying read or write failed.
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    /// A computation produced NaN or infinity.
    #[error("numeric error: {0}")]
    Numeric(String),
}

impl Error {
    /// Exit code the command-line tool uses for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Parameter(_) => 2,
            Error::Format(_) | Error::Io(_) => 3,
            Error::Numeric(_) => 4,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
