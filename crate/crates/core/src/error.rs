use crate::autodiff::TapeError;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tape(#[from] TapeError),

    #[error("invalid noise schedule: {0}")]
    Schedule(String),

    #[error("timestep {t} out of range 1..={max}")]
    TimestepOutOfRange { t: usize, max: usize },

    #[error("invalid model configuration: {0}")]
    ModelConfig(String),

    #[error("unknown condition id {0}")]
    UnknownCondition(usize),

    #[error("invalid strategy configuration: {0}")]
    StrategyConfig(String),

    #[error("invalid dataset configuration: {0}")]
    DatasetConfig(String),

    #[error("training diverged: {0}")]
    Diverged(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("checkpoint format error: {0}")]
    CheckpointFormat(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
