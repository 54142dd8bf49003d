use thiserror::Error;

#[derive(Debug, Error)]
pub enum SecganError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("dataset error: {0}")]
    Dataset(String),
    #[error("training diverged at step {step}: {what}")]
    Diverged { step: u64, what: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
    #[error("{0}")]
    Other(String),
}

pub type Result<T> = std::result::Result<T, SecganError>;

impl SecganError {
    pub fn contract(msg: impl Into<String>) -> Self {
        SecganError::Contract(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        SecganError::Shape(msg.into())
    }
}
