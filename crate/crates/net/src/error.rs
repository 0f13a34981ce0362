use thiserror::Error;

pub type Result<T, E = NetError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Core(#[from] r2map_core::Error),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("channel mismatch: network expects {expected} input channels, got {found}")]
    Channels { expected: usize, found: usize },
    #[error("echo schedule mismatch: checkpoint trained on {expected:?} ms, data has {found:?} ms")]
    EchoSchedule { expected: Vec<f64>, found: Vec<f64> },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite loss at {0}")]
    NonFiniteLoss(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("dataset: {0}")]
    Dataset(String),
}

impl From<serde_json::Error> for NetError {
    fn from(e: serde_json::Error) -> Self {
        NetError::Core(r2map_core::Error::Json(e))
    }
}
