use thiserror::Error;

/// Errors produced by the kernel library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("integer overflow computing {0}")]
    Overflow(String),

    #[error("resource limit: {requested} elements requested, budget is {budget}")]
    ResourceLimit { requested: u128, budget: u128 },

    #[error("internal consistency violated: {0}")]
    Internal(String),

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
