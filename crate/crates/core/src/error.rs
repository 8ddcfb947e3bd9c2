use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch at {layer}: expected {expected}, got {actual}")]
    ShapeMismatch {
        layer: String,
        expected: String,
        actual: String,
    },

    #[error("tensor shape {shape:?} does not hold {len} values")]
    BadTensor { shape: Vec<usize>, len: usize },

    #[error("class index {class} out of range for {classes} classes")]
    ClassOutOfRange { class: usize, classes: usize },

    #[error("invalid model: {0}")]
    InvalidModel(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("bad magic: expected \"MWF1\", found {found:?}")]
    BadMagic { found: [u8; 4] },

    #[error("weight file truncated: {0}")]
    Truncated(String),

    #[error("weight manifest inconsistent: {0}")]
    Manifest(String),

    #[error("empty split: {0}")]
    EmptySplit(String),

    #[error("training diverged at epoch {epoch}: loss is not finite")]
    Diverged { epoch: usize },

    #[error("annotation point ({x}, {y}) of {image_id} lies outside {width}x{height}")]
    PointOutOfBounds {
        image_id: String,
        x: u32,
        y: u32,
        width: usize,
        height: usize,
    },

    #[error("image {0} has no annotation points")]
    NoPoints(String),

    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }

    pub(crate) fn arg(message: impl Into<String>) -> Self {
        Error::InvalidArgument(message.into())
    }
}
