use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch ({detail})")]
    Shape { op: &'static str, detail: String },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("infeasible alignment: {frames} frames cannot emit a label sequence needing {required}")]
    InfeasibleAlignment { frames: usize, required: usize },

    #[error("instance too large: {0}")]
    TooLarge(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("unknown symbol {0:?}")]
    UnknownSymbol(String),

    #[error("label id {0} outside the vocabulary")]
    UnknownLabel(usize),

    #[error("prefix state does not match the prefix: {0}")]
    PrefixMismatch(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    #[error("architecture mismatch: {0}")]
    ArchMismatch(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("data: {0}")]
    Data(String),

    #[error("training diverged: {0}")]
    Divergence(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn shape_err<T>(op: &'static str, detail: impl Into<String>) -> Result<T> {
    Err(Error::Shape { op, detail: detail.into() })
}
