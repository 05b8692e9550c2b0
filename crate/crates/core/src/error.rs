use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// NaN/Inf appeared where finite values are required.
    #[error("numeric domain error: {0}")]
    NumericDomain(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("usage error: {0}")]
    Usage(String),

    #[error("capacity error: {needed} tokens exceed N_max = {n_max}")]
    Capacity { needed: usize, n_max: usize },

    #[error("undefined region: {0}")]
    UndefinedRegion(String),

    #[error("checkpoint format error: {0}")]
    Format(String),

    #[error("missing counterpart for pair `{stem}`: {missing}")]
    MissingCounterpart { stem: String, missing: String },

    #[error("invalid config at `{path}`: {message}")]
    InvalidConfig { path: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("png error in {path}: {message}")]
    Png { path: PathBuf, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    /// Stable integer code, shared with the C ABI.
    pub fn code(&self) -> i32 {
        match self {
            Error::NumericDomain(_) => 2,
            Error::Config(_) | Error::InvalidConfig { .. } => 3,
            Error::Usage(_) => 4,
            Error::Capacity { .. } => 5,
            Error::UndefinedRegion(_) => 6,
            Error::Format(_) | Error::Json(_) => 7,
            Error::Io { .. } | Error::Png { .. } | Error::MissingCounterpart { .. } => 8,
        }
    }
}

macro_rules! usage {
    ($($arg:tt)*) => { $crate::error::Error::Usage(format!($($arg)*)) };
}
macro_rules! config_err {
    ($($arg:tt)*) => { $crate::error::Error::Config(format!($($arg)*)) };
}
pub(crate) use config_err;
pub(crate) use usage;
