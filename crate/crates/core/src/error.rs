use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("{op}: non-finite value at flat index {index}")]
    NonFinite { op: &'static str, index: usize },

    #[error("backward requires a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("backward called on an output that is not on this tape (forward pass missing)")]
    NoForward,

    #[error("tape already consumed by a previous backward pass")]
    TapeConsumed,

    #[error("non-finite gradient for parameter {index}")]
    NonFiniteGradient { index: usize },

    #[error("parameter/gradient length mismatch: {params} vs {grads}")]
    GradientLength { params: usize, grads: usize },

    #[error("action index {index} out of range for {n} actions")]
    ActionIndex { index: usize, n: usize },

    #[error("action out of range: {0}")]
    ActionRange(String),

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty dataset")]
    EmptyDataset,

    #[error("requested {requested} trajectories from a pool of {pool}")]
    PoolTooSmall { requested: usize, pool: usize },

    #[error("non-finite loss at step {step} (batch indices {batch:?})")]
    Diverged { step: usize, batch: Vec<usize> },

    #[error("non-finite density evaluation at tuple {index}")]
    NonFiniteDensity { index: usize },

    #[error("unsupported: {0}")]
    Unsupported(String),
}
