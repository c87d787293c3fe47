use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Json(#[from] serde_json::Error),
    #[error("{0}")]
    Checkpoint(String),
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Data(String),
    #[error("{0}")]
    Model(String),
    #[error("{0}")]
    Track(String),
    #[error("{0}")]
    Eval(String),
    #[error("{0}")]
    Train(String),
    /// A verification command ran but its tolerance was not met.
    #[error("{0}")]
    Check(String),
}

impl Error {
    /// Stable short tag used as the machine-parsable prefix of CLI errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Tensor(_) => "tensor",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
            Error::Checkpoint(_) => "checkpoint",
            Error::Config(_) => "config",
            Error::Data(_) => "data",
            Error::Model(_) => "model",
            Error::Track(_) => "track",
            Error::Eval(_) => "eval",
            Error::Train(_) => "train",
            Error::Check(_) => "check",
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
