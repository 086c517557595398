use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("pair is not stabilizable: Riccati iteration did not converge after {iterations} iterations")]
    NotStabilizable { iterations: usize },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("regression has no data")]
    NoData,

    #[error("insufficient data: {0}")]
    InsufficientData(String),

    #[error("state diverged at t = {t} (|x| = {norm:e})")]
    Diverged { t: usize, norm: f64 },
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidInput(msg.into())
}
