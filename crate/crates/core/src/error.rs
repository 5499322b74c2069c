use thiserror::Error;

#[derive(Debug, Error)]
pub enum IsdaError {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("matrix is not positive semi-definite (factorization failed at jitter {jitter:e})")]
    Indefinite { jitter: f64 },

    #[error("non-finite value in {context} at sample {index}")]
    NonFinite { context: &'static str, index: usize },

    #[error("training diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, IsdaError>;

pub(crate) fn domain<T>(msg: impl Into<String>) -> Result<T> {
    Err(IsdaError::Domain(msg.into()))
}

pub(crate) fn shape<T>(msg: impl Into<String>) -> Result<T> {
    Err(IsdaError::Shape(msg.into()))
}
