use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported {what} version {found}")]
    UnsupportedVersion { what: &'static str, found: u32 },

    #[error("truncated file: expected {expected} bytes, found {actual}")]
    Truncated { expected: u64, actual: u64 },

    #[error("corrupt container: {0}")]
    Corrupt(String),

    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: String,
        expected: usize,
        actual: usize,
    },

    #[error("objective names: expected {expected} entries, got {actual}")]
    ObjectiveCount { expected: usize, actual: usize },

    #[error("duplicate objective name {0:?}")]
    DuplicateObjective(String),

    #[error("unknown objective {0:?}")]
    UnknownObjective(String),

    #[error("rating {value} outside [{min}, {max}] for objective {objective:?}")]
    OutOfRange {
        objective: String,
        value: f64,
        min: f64,
        max: f64,
    },

    #[error("objective {0:?} has no present ratings")]
    NoPresentRatings(String),

    #[error("wrong record kind: expected {expected} store")]
    WrongKind { expected: &'static str },

    #[error("empty input: {0}")]
    Empty(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("verbosity objective {0} is constant on the reference data")]
    ConstantVerbosity(usize),

    #[error("matrix is not positive definite for objective {0:?}")]
    Singular(String),

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },
}

impl Error {
    /// True for failures of the numerics rather than of the inputs' shape or syntax.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::NonFinite(_) | Error::Singular(_) | Error::Divergence { .. }
        )
    }

    pub(crate) fn dim(context: impl Into<String>, expected: usize, actual: usize) -> Self {
        Error::DimensionMismatch {
            context: context.into(),
            expected,
            actual,
        }
    }
}
