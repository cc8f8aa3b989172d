use std::path::PathBuf;

use deepdrl::DrlError;
use thiserror::Error;

pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DIVERGED: i32 = 3;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    /// Message starts with the offending field path, e.g. `train.lr_model: must be > 0`.
    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Core(#[from] DrlError),

    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed report {}: {message}", path.display())]
    Report { path: PathBuf, message: String },

    #[error("output directory {} is locked by another run", .0.display())]
    Locked(PathBuf),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl CliError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        CliError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Config(_) | CliError::Core(DrlError::Config(_)) => EXIT_CONFIG,
            CliError::Core(DrlError::Numeric(_)) => EXIT_DIVERGED,
            _ => EXIT_FAILURE,
        }
    }
}
