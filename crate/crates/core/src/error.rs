use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("format error: {0}")]
    Format(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("training diverged: {0}")]
    Divergence(String),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn arg_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Argument(msg.into()))
}
