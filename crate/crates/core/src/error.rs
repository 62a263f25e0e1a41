use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`: {reason}")]
    InvalidValue { key: String, value: String, reason: String },
    #[error("dynamics produced a non-finite state (bad dt or blow-up)")]
    NonFiniteState,
    #[error("dataset format error: {0}")]
    Format(String),
    #[error("checkpoint holds a `{found}` model, expected `{expected}`")]
    KindMismatch { expected: String, found: String },
    #[error("missing checkpoint: {0}")]
    MissingCheckpoint(String),
    #[error("training diverged at step {step}: {detail}")]
    Diverged { step: usize, detail: String },
    #[error("every plan in the batch failed numerically")]
    AllPlansFailed,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Nn(#[from] sdp_nn::NnError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable machine-readable category for structured error output.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Config(_) | Error::UnknownKey(_) | Error::InvalidValue { .. } => "config",
            Error::NonFiniteState => "non_finite_state",
            Error::Format(_) => "format",
            Error::KindMismatch { .. } => "kind_mismatch",
            Error::MissingCheckpoint(_) => "missing_checkpoint",
            Error::Diverged { .. } => "diverged",
            Error::AllPlansFailed => "all_plans_failed",
            Error::Invalid(_) => "invalid",
            Error::Nn(sdp_nn::NnError::Format(_)) => "format",
            Error::Nn(sdp_nn::NnError::Io(_)) | Error::Io(_) => "io",
            Error::Nn(_) => "numerics",
            Error::Json(_) => "format",
        }
    }
}
