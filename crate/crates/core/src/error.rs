use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got} ({context})")]
    DimensionMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("index {index} out of range 1..={max}")]
    OutOfRange { index: usize, max: usize },
    #[error("stale forward cache: cache generation {cache}, network generation {network}")]
    StaleCache { cache: u64, network: u64 },
    #[error("non-finite loss at step {step}: {dump}")]
    NonFinite { step: u64, dump: String },
    #[error("singular matrix: {0}")]
    Singular(String),
    #[error("empty dataset")]
    EmptyDataset,
    #[error("format error: {0}")]
    Format(String),
    #[error("stage `{stage}` failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn dims(expected: usize, got: usize, context: &'static str) -> Self {
        Error::DimensionMismatch {
            expected,
            got,
            context,
        }
    }
}
