use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad magic: expected QVM1, found {0:?}")]
    BadMagic([u8; 4]),
    #[error("payload length mismatch: expected {expected} bytes, found {found}")]
    PayloadLength { expected: usize, found: usize },
    #[error("unknown volume kind {0:?}")]
    UnknownKind(String),
    #[error("malformed header: {0}")]
    Header(String),
    #[error("non-finite payload")]
    NonFinite,
    #[error("invariant violated: {0}")]
    Invariant(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("length mismatch: {what} has {found} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("empty mask")]
    EmptyMask,
    #[error("normalization undefined: masked echo-1 mean is zero")]
    ZeroNorm,
    #[error("mean S0 is zero; noise level undefined")]
    ZeroMeanS0,
    #[error("relative error undefined: truth has zero norm inside the mask")]
    ZeroNormTruth,
    #[error("invalid config: {0}")]
    Config(String),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("estimator {name}: {reason}")]
    Estimator { name: String, reason: String },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
