//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid rotation: {0}")]
    InvalidRotation(String),

    #[error("empty point set: {0}")]
    EmptySet(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("invariant violation: {0}")]
    InvariantViolation(String),

    #[error("degenerate partition: {0}")]
    DegeneratePartition(String),

    #[error("parse error at line {line}: {msg}")]
    ParseError { line: usize, msg: String },

    #[error("version mismatch: {0}")]
    VersionMismatch(String),

    #[error("non-finite loss at step {step}: {msg}")]
    NonFiniteLoss { step: usize, msg: String },

    #[error("non-finite activation: {0}")]
    NonFiniteActivation(String),

    #[error("invalid group element: {0}")]
    InvalidGroupElement(String),

    #[error("config error: {0}")]
    ConfigError(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
