use thiserror::Error;

#[derive(Debug, Error)]
pub enum MtmError {
    #[error(transparent)]
    Diff(#[from] diffcore::DiffError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite value: {0}")]
    NonFinite(String),
    #[error("bad file format: {0}")]
    Format(String),
    #[error("non-finite loss at step {step}")]
    NonFiniteLoss { step: u64 },
}

pub type Result<T> = std::result::Result<T, MtmError>;

pub(crate) fn invalid(msg: impl Into<String>) -> MtmError {
    MtmError::InvalidArgument(msg.into())
}
