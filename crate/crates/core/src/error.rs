use std::path::PathBuf;

use thiserror::Error;

/// Errors raised anywhere in the pipeline.
///
/// The variants map onto process exit codes through [`Error::exit_code`].
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid shapes, hyperparameters or configuration values.
    #[error("configuration error: {0}")]
    Config(String),

    /// Invalid data values (labels out of range, malformed manifests).
    #[error("data error: {0}")]
    Data(String),

    /// API misuse: calling operations out of order or with bad arguments.
    #[error("usage error: {0}")]
    Usage(String),

    /// A checkpoint does not match the architecture it is loaded into.
    #[error("checkpoint mismatch:\n{0}")]
    CheckpointMismatch(String),

    /// A NaN or infinity appeared in a strict-mode forward pass.
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error at {path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 2 config, 3 data, 4 checkpoint mismatch, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Data(_) | Error::Image { .. } => 3,
            Error::CheckpointMismatch(_) => 4,
            _ => 1,
        }
    }
}

macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
macro_rules! usage_err {
    ($($arg:tt)*) => { $crate::error::Error::Usage(format!($($arg)*)) };
}
macro_rules! data_err {
    ($($arg:tt)*) => { $crate::error::Error::Data(format!($($arg)*)) };
}
pub(crate) use {config_err, data_err, usage_err};
