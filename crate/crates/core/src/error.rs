use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("empty active set: every element fell below the sampling threshold")]
    EmptyActiveSet,
    #[error("conjugate gradients did not converge after {iterations} iterations (relative residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("training diverged: {0}")]
    Diverged(String),
    #[error("{0}")]
    Undefined(String),
}

pub type Result<T> = std::result::Result<T, Error>;
