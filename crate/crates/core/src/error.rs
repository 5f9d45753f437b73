use crate::dataset::DataError;
use crate::numeric::NumericError;

/// Failures of the model layers (tokenizer, backbone, token space, training).
#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("invalid {field}: {msg}")]
    InvalidConfig { field: String, msg: String },
    #[error("missing parameter {0}")]
    MissingParam(String),
    #[error("no head registered for dataset {0}")]
    UnknownDataset(String),
    #[error("dataset {dataset} is a {found} task, expected {expected}")]
    TaskMismatch { dataset: String, expected: String, found: String },
    #[error("shape error: {0}")]
    Shape(String),
    #[error("masked pretraining needs at least 2 signal tokens, got {0}")]
    SignalTooShort(usize),
    #[error("{signal_len} signal tokens exceed the positional table of {max}")]
    PositionTable { signal_len: usize, max: usize },
    #[error("invalid target: {0}")]
    BadTarget(String),
    #[error("loss diverged at step {step}: {value}")]
    Diverged { step: usize, value: f64 },
}

/// Crate-level error.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    Checkpoint(#[from] crate::training::checkpoint::CheckpointError),
    #[error(transparent)]
    Config(#[from] crate::config::ConfigError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
