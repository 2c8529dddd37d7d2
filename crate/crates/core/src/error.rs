use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("missing gradient for `{0}`")]
    MissingGrad(String),

    #[error("invalid architecture: {0}")]
    Arch(String),

    #[error("invalid mask set: {0}")]
    Mask(String),

    #[error("lut query out of bounds on axis {axis}: {value}")]
    OutOfBounds { axis: &'static str, value: f64 },

    #[error("latency runner failed at {config}: {reason}")]
    Runner { config: String, reason: String },

    #[error("lut file: {0}")]
    LutFormat(String),

    #[error("2:4 sparsity needs a reduction dimension divisible by 4, got {0}")]
    NotDivisibleBy4(usize),

    #[error("no eligible pruning groups remain")]
    NoEligibleGroups,

    #[error("loss mode `{mode}` requires {what}")]
    MissingLossInput {
        mode: &'static str,
        what: &'static str,
    },

    #[error("config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Data(String),

    #[error("event log: {0}")]
    Events(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }

    /// Whether the error stems from user configuration rather than a runtime failure.
    pub fn is_config(&self) -> bool {
        matches!(self, Error::Config { .. })
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
