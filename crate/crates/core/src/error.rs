use thiserror::Error;

use crate::backends::BackendError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("prefix length {requested} out of bounds for sequence of {len} tokens")]
    Bounds { requested: i64, len: usize },

    #[error("unknown tokenizer `{0}`")]
    UnknownTokenizer(String),

    #[error("invalid parameters: {0}")]
    InvalidParams(String),

    #[error(transparent)]
    Backend(#[from] BackendError),

    #[error("invalid grid step {0}%, expected one of 5, 10, 20, 25")]
    InvalidGridStep(u32),

    #[error("expected {expected} outcome flags, got {got}")]
    WrongArity { expected: usize, got: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("schema mismatch: expected `{expected}`, found `{found}`")]
    Schema { expected: String, found: String },

    #[error("zero denominator in {0}")]
    ZeroDenominator(&'static str),

    #[error("negative input: {0}")]
    NegativeInput(&'static str),

    #[error("invalid trace profile: {0}")]
    InvalidProfile(String),

    #[error("oracle dominance requires a free SLM (zero SLM prices)")]
    PricedSlm,

    #[error("dominance violated for queries: {0:?}")]
    DominanceViolation(Vec<String>),

    #[error("embedding provider failed: {0}")]
    Embedding(String),

    #[error("reactive features need at least one SLM sample")]
    NoSamples,

    #[error("missing ground truth for query `{0}`")]
    MissingGroundTruth(String),

    #[error("{0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
