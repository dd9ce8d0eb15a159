use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Param(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("ordering error: {0}")]
    Ordering(String),
    #[error("storage error at {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {}: {msg}", path.display())]
    Format { path: PathBuf, msg: String },
    #[error("config error: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("missing parent checkpoint: {0}")]
    MissingParent(String),
    #[error("training diverged at step {step}: {msg}")]
    Divergence { step: u64, msg: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, msg: impl Into<String>) -> Self {
        Error::Format { path: path.into(), msg: msg.into() }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
