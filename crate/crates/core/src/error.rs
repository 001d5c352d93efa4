//! Crate-wide error type.
//!
//! Validation failures and numerical aborts are kept distinct because the
//! CLI maps them to different exit codes (1 and 2 respectively).

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// A configuration or input failed validation before any work started.
    #[error("validation: {0}")]
    Validation(String),

    /// A non-finite value surfaced mid-computation; the message identifies
    /// the iteration/sample so the run can be diagnosed.
    #[error("numerical abort: {0}")]
    Numeric(String),

    /// File could not be read or written.
    #[error("io on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file exists but its contents do not parse as the expected format.
    #[error("malformed {what} in {path}: {detail}")]
    Format {
        what: &'static str,
        path: PathBuf,
        detail: String,
    },

    /// Stored data disagrees with its manifest (truncated file, dimension
    /// mismatch, bad magic).
    #[error("integrity failure in {path}: {detail}")]
    Integrity { path: PathBuf, detail: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Exit code the CLI should use for this error.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Numeric(_) => 2,
            _ => 1,
        }
    }
}
