use std::path::PathBuf;

/// Errors raised anywhere in the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid shape: {0}")]
    InvalidShape(String),

    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("format error in {}:{line}: {msg}", path.display())]
    Format { path: PathBuf, line: usize, msg: String },

    #[error("checkpoint format error at byte offset {offset}: {msg}")]
    Checkpoint { offset: usize, msg: String },

    #[error("unsupported checkpoint version {found} (reader supports {supported})")]
    Version { found: u32, supported: u32 },

    #[error("non-finite loss at step {step} (batch example ids {batch:?})")]
    NonFiniteLoss { step: usize, batch: Vec<usize> },

    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape { op, detail: detail.into() }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
