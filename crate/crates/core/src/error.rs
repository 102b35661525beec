//! Crate-wide error taxonomy.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible array extents for an operation.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Non-finite values or other numeric breakdown.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Invalid configuration value or combination.
    #[error("config error: {0}")]
    Config(String),

    /// API contract violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Window/layout bookkeeping produced an out-of-bounds coordinate.
    #[error("layout violation: {0}")]
    Layout(String),

    /// Malformed text input; position is 1-based where known.
    #[error("parse error at line {line}, field {field}: {msg}")]
    Parse {
        line: usize,
        field: usize,
        msg: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
