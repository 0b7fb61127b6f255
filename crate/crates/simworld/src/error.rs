use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("unknown scenario family `{0}`")]
    UnknownFamily(String),
    #[error("step {step} outside episode of {steps} steps")]
    StepOutOfRange { step: usize, steps: usize },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("malformed data: {0}")]
    Format(String),
    #[error(transparent)]
    Core(#[from] dtx_core::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
