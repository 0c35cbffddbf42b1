use alloc::string::String;

pub type Result<T, E = Error> = core::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[non_exhaustive]
pub enum Error {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },

    #[error("log of non-positive value {0}")]
    Domain(f64),

    #[error("candidate set has no unmasked entries")]
    InvalidCandidateSet,

    #[error("backward root must be a scalar, got a {0}x{1} matrix")]
    NonScalarRoot(usize, usize),

    #[error("chosen-action propensity {propensity} is below the floor {floor}")]
    PropensityFloor { propensity: f64, floor: f64 },

    #[error("invalid sample: {0}")]
    InvalidSample(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid constraint spec `{spec}`: {msg}")]
    Validation { spec: String, msg: String },

    #[error("training diverged at iteration {iteration}: {reason}")]
    Divergence { iteration: u64, reason: String },

    #[error("report error: {0}")]
    Report(String),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn sample(msg: impl Into<String>) -> Self {
        Error::InvalidSample(msg.into())
    }
}
