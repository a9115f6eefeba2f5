use thiserror::Error;

/// Errors raised by the precoding library.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix is not positive semidefinite (pivot {pivot:e} at index {index})")]
    NotPsd { index: usize, pivot: f64 },

    #[error(
        "power iteration did not converge after {iterations} iterations (residual {residual:e})"
    )]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("channel estimate is rank deficient (singular value ratio {ratio:e})")]
    RankDeficient { ratio: f64 },

    #[error("channel vector of user {user} is zero")]
    ZeroChannel { user: usize },

    #[error("MMSE value {value:e} is at or below the inversion floor")]
    DegenerateMmse { value: f64 },

    #[error("numerical breakdown in interior-point solver: {0}")]
    NumericalBreakdown(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
