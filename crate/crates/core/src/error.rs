use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("trajectory: {0}")]
    Trajectory(String),

    #[error("history index {t} out of range for trajectory of {len} steps")]
    HistoryIndex { t: usize, len: usize },

    #[error("environment: {0}")]
    Env(#[from] EnvError),

    #[error("environment error at step {step}: {source}")]
    EpisodeStep { step: usize, source: EnvError },

    #[error("policy: {0}")]
    Policy(String),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("group: {0}")]
    Group(String),

    #[error("invalid value: {0}")]
    InvalidValue(String),

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("non-finite loss at step {step} (task {task_id})")]
    NonFiniteLoss { step: u64, task_id: String },

    #[error("io: {0}")]
    Io(#[from] std::io::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config {
            key: key.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EnvError {
    #[error("episode already finished")]
    EpisodeDone,
    #[error("environment not reset")]
    NotReset,
    #[error("action {action} is not admissible in the current state")]
    Inadmissible { action: u32 },
}
