//! Error types shared across the crate.

/// Crate-wide error type.
///
/// Variants map to the failure categories surfaced by the CLI as distinct
/// exit codes: configuration problems, bad input data, I/O, and internal
/// training aborts.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error("internal error: {0}")]
    Internal(String),

    #[error("learning-rate schedule exhausted: step {current} of {total}")]
    ScheduleExhausted { current: u64, total: u64 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("training aborted at step {step} (epoch {epoch}): {reason}")]
    TrainAbort {
        step: u64,
        epoch: usize,
        reason: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}
