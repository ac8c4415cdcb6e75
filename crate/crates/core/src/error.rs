//! Crate-level error type used by the workflows and the command line.

use std::io;

use thiserror::Error;

use crate::augment::AugmentError;
use crate::image::ImageError;
use crate::raster::RasterError;
use crate::strata::StrataError;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or arguments.
    #[error("configuration error: {0}")]
    Config(String),
    /// Unreadable, missing or malformed input data.
    #[error("data error: {0}")]
    Data(String),
    /// Non-finite values during training or evaluation.
    #[error("numerical error: {0}")]
    Numeric(String),
    #[error("io error on {path}: {source}")]
    Io { path: String, source: io::Error },
    #[error("internal error: {0}")]
    Internal(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Process exit status: 2 configuration, 3 data, 4 numerical, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Config(_) => 2,
            Self::Data(_) | Self::Io { .. } => 3,
            Self::Numeric(_) => 4,
            Self::Internal(_) => 1,
        }
    }

    pub fn io(path: impl AsRef<std::path::Path>, source: io::Error) -> Self {
        Self::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}

impl From<TensorError> for Error {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::Param(m) => Self::Config(m),
            TensorError::Shape(m) => Self::Data(m),
            TensorError::Validation(m) => Self::Numeric(m),
            TensorError::NonFinite(what) => Self::Numeric(format!("non-finite value in {what}")),
            TensorError::Usage(m) => Self::Internal(m),
        }
    }
}

impl From<AugmentError> for Error {
    fn from(e: AugmentError) -> Self {
        match e {
            AugmentError::Param(m) => Self::Config(m),
            AugmentError::Shape(m) => Self::Data(m),
        }
    }
}

impl From<StrataError> for Error {
    fn from(e: StrataError) -> Self {
        match e {
            StrataError::Param(m) => Self::Config(m),
            StrataError::Shape(m) => Self::Data(m),
            StrataError::Invariant(m) => Self::Internal(m),
        }
    }
}

impl From<ImageError> for Error {
    fn from(e: ImageError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<RasterError> for Error {
    fn from(e: RasterError) -> Self {
        Self::Data(e.to_string())
    }
}
