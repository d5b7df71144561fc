use std::path::PathBuf;

/// Library-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value at graph node {node} ({context})")]
    NonFinite { node: usize, context: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("dataset error: {0}")]
    Dataset(String),

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("{path}: {kind}")]
    Format { path: PathBuf, kind: FormatError },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("training aborted at epoch {epoch}, iteration {iteration}: {source}")]
    Training {
        epoch: usize,
        iteration: usize,
        #[source]
        source: Box<Error>,
    },
}

/// Malformed binary dataset files, with the failure mode kept distinguishable.
#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum FormatError {
    #[error("bad magic number: expected {expected:#010x}, found {found:#010x}")]
    BadMagic { expected: u32, found: u32 },

    #[error("truncated file: needed {needed} bytes, {available} available")]
    Truncated { needed: usize, available: usize },

    #[error("count mismatch: {0}")]
    CountMismatch(String),

    #[error("unsupported layout: {0}")]
    Unsupported(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Short stable tag used by the CLI for machine-parsable error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape(_) => "shape",
            Error::NonFinite { .. } => "non-finite",
            Error::Config(_) => "config",
            Error::Dataset(_) => "dataset",
            Error::Checkpoint(_) => "checkpoint",
            Error::Format { .. } => "format",
            Error::Io(_) => "io",
            Error::Training { .. } => "training",
        }
    }
}
