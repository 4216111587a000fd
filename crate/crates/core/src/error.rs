use thiserror::Error;

/// Error type shared by every module of the crate.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid dimension: {0}")]
    InvalidDimension(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("empty context: {0}")]
    EmptyContext(String),
    #[error("hardmax tie between columns {0} and {1}")]
    Tie(usize, usize),
    #[error("domain error: {0}")]
    Domain(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate input: {0}")]
    Degenerate(String),
    #[error("quadrature did not reach tolerance {tol:e} (achieved {achieved:e}) for {what}")]
    Quadrature { what: String, tol: f64, achieved: f64 },
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

pub type Result<T> = std::result::Result<T, Error>;
