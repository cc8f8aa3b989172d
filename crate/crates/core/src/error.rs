use thiserror::Error;

/// Errors produced across the library.
#[derive(Debug, Error)]
pub enum DrlError {
    /// Dimensions or hyperparameters that cannot describe a valid model or dataset.
    #[error("configuration error: {0}")]
    Config(String),

    /// A caller broke an operation's precondition (empty input, out-of-range ratio, ...).
    #[error("contract violation: {0}")]
    Contract(String),

    #[error("parse error at row {row}, column {column}: {message}")]
    Parse {
        row: usize,
        column: usize,
        message: String,
    },

    /// A quantity left the safe numeric range (tiny denominators, non-finite losses).
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, DrlError>;

pub(crate) fn config<T>(msg: impl Into<String>) -> Result<T> {
    Err(DrlError::Config(msg.into()))
}

pub(crate) fn contract<T>(msg: impl Into<String>) -> Result<T> {
    Err(DrlError::Contract(msg.into()))
}
