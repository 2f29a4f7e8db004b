use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Errors raised anywhere in the toolkit.
///
/// Variants are grouped so that the CLI can map them onto its exit codes:
/// configuration problems are usage errors, anything about input files or
/// annotations is a data error, and shape or gradient failures are numeric.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("archive format error: {0}")]
    Format(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("backward called before forward")]
    NoForwardCache,
    #[error("missing gradient for parameter `{0}`")]
    MissingGradient(String),
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
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 usage, 2 data, 3 numeric.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::InvalidArgument(_) | Error::Config(_) => 1,
            Error::Data(_)
            | Error::Format(_)
            | Error::Io { .. }
            | Error::Image { .. }
            | Error::Json(_) => 2,
            Error::Shape(_)
            | Error::Numeric(_)
            | Error::NoForwardCache
            | Error::MissingGradient(_) => 3,
        }
    }
}

macro_rules! shape_err {
    ($($arg:tt)*) => { $crate::error::Error::Shape(format!($($arg)*)) };
}
pub(crate) use shape_err;
