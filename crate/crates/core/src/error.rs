use thiserror::Error;

/// Errors raised by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("singular matrix in {0}")]
    Singular(&'static str),
    #[error("eigendecomposition failed: {0}")]
    Eigen(String),
    #[error("direction is not a descent direction (slope {0:e})")]
    NotDescent(f64),
    #[error("trajectory budget exhausted")]
    BudgetExhausted,
    #[error("cache i/o: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
