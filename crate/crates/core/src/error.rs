use std::io;

/// Errors produced by the engine.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An argument violated a precondition (bad dims, mismatched lattices, ...).
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// A file or byte stream did not match the expected binary layout.
    #[error("malformed {kind} data: {reason}")]
    Format { kind: &'static str, reason: String },

    #[error(transparent)]
    Io(#[from] io::Error),

    /// The guidance service could not be reached or answered garbage at the transport level.
    #[error("guidance transport failure at step {step}: {reason}")]
    Transport { step: u64, reason: String },

    /// The guidance service answered with a well-formed but invalid payload.
    #[error("guidance protocol error: {0}")]
    Protocol(String),

    /// NaN or infinity appeared in a loss, gradient or parameter.
    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn format(kind: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            kind,
            reason: reason.into(),
        }
    }
}
