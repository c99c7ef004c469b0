use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("non-finite activation at layer {layer}, unit {unit}")]
    Overflow { layer: usize, unit: usize },

    #[error("loss `{loss}` evaluated to {value}")]
    NonFiniteLoss { loss: String, value: f64 },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("enumeration capacity exceeded: {units} stochastic units (limit {limit})")]
    Capacity { units: usize, limit: usize },

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("numerical divergence at step {step}: {detail}")]
    Divergence { step: usize, detail: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }
}
