//! Crate-wide error type.

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (bad hyperparameter, unknown method name, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// Input data failed validation (non-finite values, bad grades, ...).
    #[error("validation error: {0}")]
    Validation(String),

    /// Tensor or mask shapes do not line up.
    #[error("shape error: {0}")]
    Shape(String),

    /// Collections with different embedding dimensions were mixed.
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    /// A text input could not be parsed.
    #[error("parse error at line {line}: {message}")]
    Parse { line: usize, message: String },

    /// A duplicate entry was found where uniqueness is required.
    #[error("duplicate entry: {0}")]
    Duplicate(String),

    /// Stored files are inconsistent with their manifest.
    #[error("corrupt store: {0}")]
    CorruptStore(String),

    /// A computation produced non-finite values or otherwise failed numerically.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A checkpoint does not match the current run configuration.
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    /// An operation that needs data received none.
    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
