use reprog_kernel::KernelError;
use thiserror::Error;

use crate::models::AccountId;

#[derive(Debug, Error)]
pub enum CoreError {
    #[error(transparent)]
    Kernel(#[from] KernelError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("account {0} is blocked")]
    Blocked(AccountId),
    #[error("all {0} attacker accounts were blocked")]
    AccountsExhausted(usize),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("statistics undefined: {0}")]
    UndefinedStats(&'static str),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CoreError {
    /// True for errors caused by bad configuration or inputs rather than
    /// numeric breakdown.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            CoreError::Config(_) | CoreError::InvalidInput(_) | CoreError::Kernel(KernelError::Shape(_))
        )
    }
}

pub type Result<T> = std::result::Result<T, CoreError>;

pub(crate) fn config_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(CoreError::Config(msg.into()))
}
