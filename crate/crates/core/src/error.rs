use std::path::PathBuf;

use crate::tensor::TensorError;

/// Errors above the tensor layer, grouped by how a caller should react.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Malformed or inconsistent input data.
    #[error("{0}")]
    Data(String),
    /// Invalid configuration or arguments.
    #[error("{0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Training or evaluation produced non-finite values.
    #[error("{0}")]
    Numeric(String),
    #[error(transparent)]
    Tensor(TensorError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::NonFinite { .. } => Error::Numeric(e.to_string()),
            e => Error::Tensor(e),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
