//! Error types shared across the crate.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Shapes of operands do not agree.
    #[error("dimension error: {0}")]
    Dim(String),
    /// Inputs violate a documented consistency requirement (e.g. a mask is
    /// not a subset of the acquired indices).
    #[error("consistency error: {0}")]
    Consistency(String),
    /// A linear system cannot be solved as configured.
    #[error("solver error: {0}")]
    Solver(String),
    /// A partition policy cannot be realized on the given mask.
    #[error("policy error: {0}")]
    Policy(String),
    /// The caller used an API outside its contract.
    #[error("usage error: {0}")]
    Usage(String),
    /// A reference quantity is degenerate (e.g. zero norm).
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    /// A file does not conform to its declared format.
    #[error("format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
