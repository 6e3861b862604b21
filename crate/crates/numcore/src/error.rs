use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumError {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("corrupt tensor blob: {0}")]
    Corrupt(String),

    #[error("tensor blob format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NumError>;
