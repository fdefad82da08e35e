use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid rate: target fps {target} exceeds source fps {source_fps}")]
    InvalidRate { source_fps: f64, target: f64 },

    #[error("parameter error: {0}")]
    Parameter(String),

    #[error("structural violation at position {position}: {reason}")]
    Structure { position: usize, reason: String },

    #[error("numerical failure in {component}: {reason}")]
    Numerical { component: String, reason: String },

    #[error("sequence length {len} exceeds context length {context}")]
    Length { len: usize, context: usize },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error(transparent)]
    Tensor(#[from] candle_core::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Parameter(_) | Error::InvalidRate { .. } => 2,
            Error::Numerical { .. } => 3,
            Error::Structure { .. } => 4,
            _ => 1,
        }
    }
}
