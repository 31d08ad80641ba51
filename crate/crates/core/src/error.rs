//! Crate-wide error type.
//!
//! The CLI maps these onto process exit codes (config → 2, data → 3,
//! numeric → 4), so the variants are part of the public contract.

/// Errors surfaced by any public operation in this crate.
#[derive(Debug, thiserror::Error)]
pub enum CoreError {
    /// Tensor dimensions do not line up for the requested operation.
    #[error("shape mismatch: {0}")]
    Shape(String),
    /// An argument violates a documented precondition.
    #[error("invalid argument: {0}")]
    Invalid(String),
    /// KV-cache misuse: wrong shape for the session or reuse across sessions.
    #[error("cache error: {0}")]
    Cache(String),
    /// Run-configuration parse or validation failure.
    #[error("config error: {0}")]
    Config(String),
    /// Dataset files missing, malformed, or unwritable.
    #[error("data error: {0}")]
    Data(String),
    /// Numeric failure (non-finite loss or activation).
    #[error("numeric failure: {0}")]
    Numeric(String),
    /// Serialized tensor/checkpoint bytes do not follow the documented format.
    #[error("format error: {0}")]
    Format(String),
    /// Underlying I/O failure.
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;
