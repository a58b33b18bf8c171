use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph; call reset() first")]
    BackwardTwice,

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("optimizer state is not initialized for this parameter set")]
    UninitializedState,

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("layout mismatch: expected {expected:#018x}, found {found:#018x}")]
    LayoutMismatch { expected: u64, found: u64 },

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("unsupported format version {found} (expected {expected})")]
    Version { expected: u32, found: u32 },

    #[error("bad magic bytes: {0:?}")]
    Magic([u8; 4]),

    #[error("truncated input at byte offset {offset}: needed {needed} more bytes")]
    Truncated { offset: u64, needed: usize },

    #[error("malformed record at byte offset {offset}: {detail}")]
    Malformed { offset: u64, detail: String },

    #[error("diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },

    #[error("incompatible artifact: {0}")]
    Incompatible(String),

    #[error("missing artifact: {0}")]
    MissingArtifact(String),

    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: String,
        #[source]
        source: Box<Error>,
    },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
