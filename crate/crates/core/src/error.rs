//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor/layer shape mismatch. The message names both shapes.
    #[error("dimension mismatch: {0}")]
    Dim(String),

    /// A caller violated an operation's precondition.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A value is outside the legal range of an operation.
    #[error("out of range: {0}")]
    Range(String),

    /// The model kind does not support the requested operation.
    #[error("unsupported: {0}")]
    Capability(String),

    /// Corrupt or truncated file. `offset` is the byte position of the
    /// first inconsistency.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    /// A linear system could not be factorized.
    #[error("ill-conditioned system: {0}")]
    Conditioning(String),

    /// A statistic is undefined for the given data (e.g. zero variance,
    /// all-zero differences).
    #[error("degenerate statistic: {0}")]
    Degenerate(String),

    /// Training aborted; the message carries epoch/batch/lr diagnostics.
    #[error("training aborted: {0}")]
    Training(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn dim(msg: impl Into<String>) -> Self {
        Error::Dim(msg.into())
    }

    pub fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format { offset, msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
