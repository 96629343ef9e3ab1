use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}:{line}: malformed row: {reason}")]
    MalformedRow {
        path: PathBuf,
        line: usize,
        reason: String,
    },

    #[error("corpus is empty after filtering")]
    EmptyCorpus,

    #[error("user {user} has {len} interaction(s); leave-one-out needs at least 2")]
    SplitTooShort { user: u64, len: usize },

    #[error("need at least 2 sequences per batch, got {0}")]
    BatchTooSmall(usize),

    #[error("invalid synthetic spec: {0}")]
    InvalidSpec(String),

    #[error("invalid noise schedule: {0}")]
    InvalidSchedule(String),

    #[error("diffusion step {step} outside 1..={max}")]
    StepRange { step: usize, max: usize },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("temperature must be positive, got {0}")]
    InvalidTemperature(f64),

    #[error("item id {id} outside 0..={max}")]
    Index { id: usize, max: usize },

    #[error("guidance is entirely padding")]
    DegenerateInput,

    #[error("empty batch")]
    EmptyBatch,

    #[error("cosine similarity undefined for zero-norm prediction at index {0}")]
    UndefinedCosine(usize),

    #[error("non-finite value in {component}")]
    Numerical { component: String },

    #[error("K = {k} but only {available} candidate items")]
    InvalidK { k: usize, available: usize },

    #[error("rank must be >= 1, got {0}")]
    InvalidRank(usize),

    #[error("threshold undefined: distribution mean is zero")]
    ThresholdUndefined,

    #[error("invalid state: {0}")]
    InvalidState(String),

    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),

    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn numerical(component: impl Into<String>) -> Self {
        Error::Numerical {
            component: component.into(),
        }
    }
}
