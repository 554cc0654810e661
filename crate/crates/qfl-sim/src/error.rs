//! Error types shared across the simulator.

use thiserror::Error;

/// Unified error type for the simulator.
///
/// The variants map onto how a failure should be handled by a driver:
/// `Config` means the run was mis-specified and nothing was executed,
/// `Input` means a particular call received bad data, `Structural` means
/// an index or dimension mismatch inside an otherwise valid object, and
/// `Numerical` means a computation produced non-finite values at runtime.
#[derive(Debug, Error)]
pub enum QflError {
    /// Invalid configuration value, detected before any work starts.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid data handed to an operation (empty batch, out-of-range feature, ...).
    #[error("input error: {0}")]
    Input(String),

    /// Index or dimension mismatch.
    #[error("structural error: {0}")]
    Structural(String),

    /// Non-finite loss or gradient; the affected client aborts its round.
    #[error("numerical error: {0}")]
    Numerical(String),

    /// Malformed file contents (IDX parsing, config files).
    #[error("format error: {0}")]
    Format(String),

    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

impl QflError {
    pub fn config(msg: impl Into<String>) -> Self {
        QflError::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        QflError::Input(msg.into())
    }
    pub fn structural(msg: impl Into<String>) -> Self {
        QflError::Structural(msg.into())
    }
    pub fn numerical(msg: impl Into<String>) -> Self {
        QflError::Numerical(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        QflError::Format(msg.into())
    }
}

pub type Result<T> = std::result::Result<T, QflError>;
