use std::path::PathBuf;

/// Errors surfaced by the toolkit. Each variant maps to a stable machine-readable kind.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// An input outside the domain of an operation (out-of-bounds pixel, invalid depth, ...).
    #[error("domain error: {0}")]
    Domain(String),
    /// An inconsistent or invalid configuration.
    #[error("config error: {0}")]
    Config(String),
    /// A call that violates an object's lifecycle contract, e.g. stepping a finished episode.
    #[error("contract error: {0}")]
    Contract(String),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    /// Malformed on-disk data (manifest, checkpoint, image).
    #[error("format error: {0}")]
    Format(String),
}

impl Error {
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Domain(_) => "domain",
            Error::Config(_) => "config",
            Error::Contract(_) => "contract",
            Error::Io { .. } => "io",
            Error::Format(_) => "format",
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;

macro_rules! domain_err {
    ($($arg:tt)*) => { $crate::error::Error::Domain(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use domain_err;
