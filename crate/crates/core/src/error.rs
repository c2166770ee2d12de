use std::io;

use thiserror::Error;

/// Errors raised anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
    #[error("axis {axis} invalid for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("variable {0} does not belong to this tape")]
    DetachedTensor(usize),

    #[error("text is empty")]
    EmptyText,
    #[error("unknown word class `{0}`")]
    UnknownClass(String),
    #[error("length mismatch: expected {expected}, got {got}")]
    LengthMismatch { expected: usize, got: usize },
    #[error("sequence of length {len} exceeds max_len {max}")]
    TooLong { len: usize, max: usize },

    #[error("invalid placement: {0}")]
    InvalidPlacement(String),
    #[error("cannot parse `{input}`: {reason}")]
    Parse { input: String, reason: String },

    #[error("value out of range: {0}")]
    Range(String),
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("requested zero items")]
    ZeroCount,

    #[error("targeted attack requires a target caption")]
    MissingTarget,
    #[error("attack budget must be at least one step")]
    ZeroSteps,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("circular shift needs at least two captions")]
    SingletonBatch,

    #[error("rank list is empty")]
    EmptyRanks,
    #[error("baseline ASR is zero; relative change undefined")]
    ZeroBaseline,
    #[error("index out of range: {0}")]
    InvalidIndex(String),

    #[error("malformed file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::ShapeMismatch(msg.into())
    }

    pub(crate) fn parse(input: &str, reason: impl Into<String>) -> Self {
        Error::Parse {
            input: input.to_string(),
            reason: reason.into(),
        }
    }
}
