use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("shape {shape:?} does not hold {len} elements")]
    DataLength { shape: Vec<usize>, len: usize },

    #[error("invalid axis {axis} for rank-{rank} tensor")]
    Axis { axis: usize, rank: usize },

    #[error("{op}: empty dimension")]
    EmptyDimension { op: &'static str },

    #[error("target index {index} out of range for {classes} classes")]
    TargetOutOfRange { index: usize, classes: usize },

    #[error("token id {id} is outside the vocabulary of size {vocab}")]
    OutOfVocabulary { id: usize, vocab: usize },

    #[error("no attendable keys")]
    NoAttendableKeys,

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("backward already ran on this graph")]
    BackwardTwice,

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("function is not deterministic: two forward passes differ ({first} vs {second})")]
    NonDeterministic { first: f64, second: f64 },

    #[error("invalid configuration: {field}: {constraint}")]
    Config { field: String, constraint: String },

    #[error("frame budget exceeded: {frames} frames given, budget is {budget}")]
    FrameBudget { frames: usize, budget: usize },

    #[error("non-finite gradient for parameter {name}")]
    NonFiniteGradient { name: String },

    #[error("loss became non-finite at step {step}")]
    NonFiniteLoss { step: usize },

    #[error("checkpoint mismatch: {0}")]
    Checkpoint(String),

    #[error("frozen parameter {name} received a nonzero gradient")]
    FrozenGradient { name: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: String, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn config(field: impl Into<String>, constraint: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            constraint: constraint.into(),
        }
    }
}
