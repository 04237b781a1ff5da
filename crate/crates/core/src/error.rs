use thiserror::Error;

/// Errors raised by the numerical kernels and the experiment runner.
#[derive(Debug, Error)]
pub enum LabError {
    /// An argument lies outside the operation's domain.
    #[error("domain error: {0}")]
    Domain(String),
    /// A discretisation is too coarse for the requested tolerance.
    #[error("accuracy error: {0}")]
    Accuracy(String),
    /// Configuration text could not be parsed.
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    /// Configuration parsed but violates a constraint.
    #[error("invalid configuration: {0}")]
    Validation(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, LabError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Domain(msg.into()))
}

pub(crate) fn accuracy<T>(msg: impl Into<String>) -> Result<T> {
    Err(LabError::Accuracy(msg.into()))
}
