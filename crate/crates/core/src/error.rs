use thiserror::Error;

use crate::numerics::TensorError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("sequence of length {len} exceeds the maximum of {max}")]
    Overlength { len: usize, max: usize },
    #[error("invalid token sequence: {0}")]
    InvalidSequence(String),
    #[error("span {start}+{len} is invalid for a sequence of length {seq_len}")]
    InvalidSpan {
        start: usize,
        len: usize,
        seq_len: usize,
    },
    #[error("span covers special or protected tokens")]
    ProtectedSpan,
    #[error("no selectable tokens")]
    NothingSelectable,
    #[error("sequence has no maskable tokens")]
    NoMaskableTokens,
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("corpus needs at least two attribute classes, found {0}")]
    SingleClass(usize),
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("attribute index {index} out of range for {count} attributes")]
    AttributeOutOfRange { index: usize, count: usize },
    #[error("unsupported format version {found}, expected {expected}")]
    Version { found: u32, expected: u32 },
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("malformed input: {0}")]
    Format(String),
    #[error("{0}")]
    InvalidArgument(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
