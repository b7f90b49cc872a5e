//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// A probability vector failed validation.
    #[error("invalid distribution: {0}")]
    InvalidDist(String),

    /// A model or tree parameter is out of range.
    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    /// An operation that needs a nonempty tree got an empty one.
    #[error("no draft")]
    NoDraft,

    /// Protocol-level violation (context mismatch, stale response,
    /// duplicate outstanding request).
    #[error("protocol error: {0}")]
    Protocol(String),

    /// Wire decode failure; the message names the offending field.
    #[error("decode error: {0}")]
    Decode(String),

    /// State-space guard tripped (exact enumeration would be too large).
    #[error("enumeration too large: {0}")]
    EnumerationTooLarge(String),

    /// Configuration rejected before any work started.
    #[error("config error: {0}")]
    Config(String),

    /// Metrics asked of an empty trace.
    #[error("empty trace: {0}")]
    EmptyTrace(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
