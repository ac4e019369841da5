use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("position {0} is not masked")]
    PositionNotMasked(usize),
    #[error("no prediction for masked position {0}")]
    MissingPrediction(usize),
    #[error("invalid token distribution: {0}")]
    InvalidDistribution(String),
    #[error("invalid decode state: {0}")]
    InvalidState(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("margin needs at least two listed tokens")]
    InsufficientTopK,
    #[error("step score over an empty selection")]
    EmptySelection,
    #[error("no decoded tokens precede the delimiter")]
    NoTokensInScope,
    #[error("trace decoded no tokens")]
    EmptyTrace,

    #[error("subset size {n} exceeds {len} available scores")]
    SubsetTooLarge { n: usize, len: usize },
    #[error("brute force would enumerate {0} subsets (cap is 1e6)")]
    TooManyCombinations(u128),

    #[error("candidate has no masked positions")]
    NothingMasked,
    #[error("candidate pool is empty")]
    EmptyPool,
    #[error("beam is empty")]
    EmptyBeam,

    #[error("backend failed at step {step}: {source}")]
    BackendFailure {
        step: usize,
        #[source]
        source: Box<Error>,
    },
    #[error("state length {state} does not match instance length {instance}")]
    LengthMismatch { state: usize, instance: usize },
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("worker reported error: {0}")]
    Backend(String),
    #[error("timed out waiting for worker")]
    Timeout,

    #[error("exhaustive oracle supports at most 6 generated positions, got {0}")]
    TooLong(usize),
    #[error("malformed trace file: {0}")]
    TraceFormat(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
