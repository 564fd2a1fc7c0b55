//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by model construction, training, and evaluation.
#[derive(Debug, Error)]
pub enum Error {
    /// Dimension mismatch between an input and what the receiver expects.
    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    Shape {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    /// An API was called in an unsupported state (stale cache, predictions
    /// already attached, and so on).
    #[error("usage error: {0}")]
    Usage(String),

    /// Invalid configuration value.
    #[error("config error: {0}")]
    Config(String),

    /// Training diverged or produced non-finite numbers.
    #[error("training error: {0}")]
    Training(String),

    /// A linear solve failed even after ridge stabilization.
    #[error("linear algebra error: {0}")]
    Linalg(String),

    /// Malformed input data.
    #[error("data error: {0}")]
    Data(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
