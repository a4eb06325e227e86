use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("degenerate 6D rotation: {0}")]
    DegenerateRotation(&'static str),

    #[error("invalid axis convention {0:?}: {1}")]
    InvalidConvention(String, &'static str),

    #[error("axis {index} is not unit length (norm {norm})")]
    NonUnitAxis { index: usize, norm: f64 },

    #[error("{what}: expected {expected}, got {actual}")]
    DimensionMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("model definition invalid at {path}: {message}")]
    InvalidModel { path: String, message: String },

    #[error("camera scale must be positive, got {0}")]
    NonPositiveScale(f64),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("objective is not finite at the initial state")]
    NonFiniteObjective,

    #[error("degenerate point set: {0}")]
    DegeneratePoints(&'static str),

    #[error("normalizer must be positive, got {0}")]
    NonPositiveNormalizer(f64),

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dims(what: &'static str, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch { what, expected, actual }
    }

    pub(crate) fn model(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::InvalidModel {
            path: path.into(),
            message: message.into(),
        }
    }

    /// True for errors caused by bad inputs rather than numerical failure.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::NonFiniteObjective)
    }
}
