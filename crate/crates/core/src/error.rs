//! Error type shared across the library.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed, missing or inconsistent input data.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration or arguments.
    #[error("config error: {0}")]
    Config(String),

    /// Tensor shape disagreement between data, graph and model.
    #[error("shape error: {0}")]
    Shape(String),

    /// Non-finite values produced during a forward or backward pass, or a
    /// non-finite loss.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    /// Checkpoint incompatible with the requested configuration or data.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numeric(msg: impl Into<String>) -> Self {
        Error::Numeric(msg.into())
    }
}

impl From<ndarray_npy::ReadNpzError> for Error {
    fn from(e: ndarray_npy::ReadNpzError) -> Self {
        Error::Data(format!("npz read: {e}"))
    }
}

impl From<ndarray_npy::ReadNpyError> for Error {
    fn from(e: ndarray_npy::ReadNpyError) -> Self {
        Error::Data(format!("npy read: {e}"))
    }
}

impl From<ndarray_npy::WriteNpyError> for Error {
    fn from(e: ndarray_npy::WriteNpyError) -> Self {
        Error::Data(format!("npy write: {e}"))
    }
}

impl From<ndarray::ShapeError> for Error {
    fn from(e: ndarray::ShapeError) -> Self {
        Error::Shape(e.to_string())
    }
}

impl From<toml::de::Error> for Error {
    fn from(e: toml::de::Error) -> Self {
        Error::Config(e.to_string())
    }
}
