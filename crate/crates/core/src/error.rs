use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = S3poError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum S3poError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// Geometry the operation cannot express, e.g. a cyclic swap of an odd-width frame.
    #[error("unsupported geometry: {0}")]
    UnsupportedGeometry(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    /// Malformed checkpoint or dataset file. `field` names the offending entry.
    #[error("format error in `{field}`: {message}")]
    Format { field: String, message: String },

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error on {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

impl S3poError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        S3poError::InvalidArgument(msg.into())
    }

    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        S3poError::ShapeMismatch(msg.into())
    }

    pub(crate) fn format(field: impl Into<String>, message: impl Into<String>) -> Self {
        S3poError::Format {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        S3poError::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether the error stems from bad input data rather than bad numerics.
    pub fn is_numeric(&self) -> bool {
        matches!(self, S3poError::Numeric(_))
    }
}
