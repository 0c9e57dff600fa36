use thiserror::Error;

#[derive(Debug, Error)]
pub enum DotError {
    #[error("{op}: dimension mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("softmax row {row} has no finite entry")]
    DegenerateRow { row: usize },

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("input of length {len} exceeds the limit of {max}")]
    InputTooLong { len: usize, max: usize },

    #[error("budget {budget} cannot hold the {required} mandatory tokens")]
    Budget { budget: usize, required: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("unknown model preset `{0}`")]
    UnknownPreset(String),

    #[error("gradient check failed: {0}")]
    GradCheck(String),

    #[error("training diverged at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),

    #[error("malformed input data: {0}")]
    Data(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T, E = DotError> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> DotError {
    DotError::Contract(msg.into())
}
