use std::io;

use cbit_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    /// True for failures caused by arithmetic (non-finite values, zero norms)
    /// rather than by bad input.
    pub fn is_numeric(&self) -> bool {
        match self {
            Error::Numeric(_) => true,
            Error::Tensor(e) => matches!(e, TensorError::NonFinite { .. } | TensorError::ZeroNorm { .. }),
            _ => false,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
