use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-integral output extent: {0}")]
    NonIntegralExtent(String),

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("invalid lambda {num}/{den}: must satisfy 0 <= lambda <= 1")]
    InvalidLambda { num: u64, den: u64 },

    #[error("filter bank has width {have}, task trained against {need}")]
    BankTooNarrow { have: usize, need: usize },

    #[error("task {0} already contributed a block to this bank")]
    DuplicateBlock(usize),

    #[error("task {0} is not present in the run")]
    MissingTask(usize),

    #[error("task {requested} is not the current task (latest is {current})")]
    NotCurrentTask { requested: usize, current: usize },

    #[error("mode {requested} is incompatible with run history ({history})")]
    IncompatibleMode { requested: String, history: String },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed file at byte offset {offset}: {msg}")]
    Format { offset: usize, msg: String },

    #[error("frozen parameters changed during training: {0}")]
    FreezeViolation(String),

    #[error("run directory {0} is locked by another writer")]
    Locked(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }
}
