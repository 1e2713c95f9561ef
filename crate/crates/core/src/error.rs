//! Crate-wide error type.
//!
//! Variants are grouped by failure class so callers (notably the CLI) can map
//! them onto distinct exit codes: shape mismatches, invalid inputs or
//! configuration, numeric failures, and file I/O.

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Image or tensor dimensions do not satisfy an operation's contract.
    #[error("shape error: {0}")]
    Shape(String),

    /// Input values violate a precondition (NaN disparity, empty scene, ...).
    #[error("invalid input: {0}")]
    Input(String),

    /// A configuration value or file is invalid; the message names the
    /// offending key or line.
    #[error("configuration error: {0}")]
    Config(String),

    /// A numeric procedure failed (NaN loss, solver divergence).
    #[error("numeric failure: {0}")]
    Numeric(String),

    /// Underlying I/O failure, tagged with the path at fault.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    /// A file parsed but its contents are malformed for the expected format.
    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
