//! Error type shared across the workspace.

use std::path::PathBuf;

/// Unified error for all pipeline operations.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Bad configuration: unknown keys, out-of-range values, malformed TOML.
    #[error("config error: {0}")]
    Config(String),

    /// Bad or missing data: malformed task files, schema violations, absent checkpoints.
    #[error("data error: {0}")]
    Data(String),

    /// An operation was called with arguments violating its preconditions.
    #[error("invalid input: {0}")]
    Invalid(String),

    /// Non-finite values where finite ones are required.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
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

    /// Process exit code for the CLI: 2 for configuration errors, 3 for data errors.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            _ => 3,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
