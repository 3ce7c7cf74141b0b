use thiserror::Error;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error("shape error: {0}")]
    Shape(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("invalid network: {0}")]
    InvalidNet(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, KernelError>;

pub(crate) fn shape_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(KernelError::Shape(msg.into()))
}
