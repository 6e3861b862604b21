use dtam_numcore::NumError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DtamError {
    #[error(transparent)]
    Num(#[from] NumError),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("checkpoint corrupt: {0}")]
    Corrupt(String),

    #[error("feature disabled: {0}")]
    Disabled(String),
}

pub type Result<T> = std::result::Result<T, DtamError>;
