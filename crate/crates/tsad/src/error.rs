use std::path::PathBuf;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor/layer shapes are inconsistent with each other or with a config.
    #[error("configuration error: {0}")]
    Config(String),

    /// Caller-supplied data is invalid (out-of-range target, bad box, ...).
    #[error("input error: {0}")]
    Input(String),

    /// An API was used outside its contract (non-scalar loss, empty tape, ...).
    #[error("usage error: {0}")]
    Usage(String),

    /// A forward pass or loss produced NaN/Inf.
    #[error("numeric error in `{op}`: {detail}")]
    Numeric { op: &'static str, detail: String },

    /// A serialized artifact (dataset blob, checkpoint, config) is malformed.
    #[error("format error: {0}")]
    Format(String),

    #[error("i/o error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
    pub fn input(msg: impl Into<String>) -> Self {
        Error::Input(msg.into())
    }
    pub fn usage(msg: impl Into<String>) -> Self {
        Error::Usage(msg.into())
    }
    pub fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
