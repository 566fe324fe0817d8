use alloc::string::String;
use alloc::vec::Vec;

/// Errors raised by the algorithmic core.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {left:?} and {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    InvalidArgument { op: &'static str, msg: String },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("parameter `{0}` has no gradient")]
    MissingGrad(String),
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("empty input")]
    EmptyInput,
    #[error("all events share one timestamp; cannot bin into steps")]
    DegenerateTimeRange,
    #[error("split leaves the {0} subset empty")]
    EmptySplit(&'static str),
    #[error("node `{0}` does not occur in the graph")]
    UnknownNode(String),
    #[error("sequence of length {len} exceeds the maximum of {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("training diverged at step {step}")]
    Diverged { step: usize },
    #[error("no annotated positives in the retrieval pool")]
    NoPositives,
    #[error("no candidates remain after filtering")]
    EmptyCandidates,
    #[error("query has no history tokens; lexical retrieval has no signal")]
    NoSignal,
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn invalid(op: &'static str, msg: impl Into<String>) -> Error {
    Error::InvalidArgument {
        op,
        msg: msg.into(),
    }
}
