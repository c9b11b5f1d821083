use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    Input(String),
    #[error("payload error: {0}")]
    Payload(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("capture error: {0}")]
    Capture(String),
    #[error("embedding gradient not available for this capture")]
    LeakUnavailable,
    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Tensor(#[from] fedpet_autodiff::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
