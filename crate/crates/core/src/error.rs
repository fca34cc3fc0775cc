use thiserror::Error;

/// Errors raised by the guidance toolkit.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    /// A configuration value is out of range or inconsistent.
    #[error("invalid configuration field `{field}`: {reason}")]
    Config { field: String, reason: String },

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Two tensors that must share a shape do not.
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    /// A trajectory produced a non-finite state.
    #[error("non-finite state at timestep {step} under strategy {strategy}")]
    NonFinite { step: usize, strategy: String },

    /// A checkpoint could not be parsed.
    #[error("malformed checkpoint at line {line}: {reason}")]
    Checkpoint { line: usize, reason: String },
}

impl Error {
    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
