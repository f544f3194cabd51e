use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("malformed gallery file: {0}")]
    Format(String),

    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },

    #[error("duplicate image id `{0}`")]
    DuplicateId(String),

    #[error("non-finite value in vector for `{0}`")]
    NonFinite(String),

    #[error("zero vector cannot be normalized")]
    ZeroVector,

    #[error("gallery must contain at least one entry")]
    EmptyGallery,

    #[error("unknown image id `{0}`")]
    UnknownImage(String),

    #[error("invalid caption: {0}")]
    InvalidCaption(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("replay table has no entry for ({triplet_id}, round {round})")]
    ReplayMissing { triplet_id: String, round: usize },

    /// Transport-level failure talking to a remote provider, after retries.
    #[error("remote call to {endpoint} failed: {message}")]
    Transport { endpoint: String, message: String },

    #[error("remote provider returned an empty response from {0}")]
    EmptyResponse(String),

    #[error("ranking is empty: every gallery entry was excluded")]
    AllExcluded,

    #[error("no target id present in ranking")]
    TargetMissing,

    #[error("invalid feedback request: {0}")]
    InvalidRequest(String),

    #[error("template error: {0}")]
    Template(String),

    #[error("session is terminal")]
    SessionTerminal,

    #[error("round {round}: {source}")]
    Round {
        round: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("report invariant violated: {0}")]
    InvariantViolation(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),

    #[error("store error: {0}")]
    Store(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Whether a retry of the same call could plausibly succeed.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Error::Transport { .. })
    }

    pub(crate) fn in_round(self, round: usize) -> Self {
        match self {
            e @ Error::Round { .. } => e,
            other => Error::Round {
                round,
                source: Box::new(other),
            },
        }
    }
}
