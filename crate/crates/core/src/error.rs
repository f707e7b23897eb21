use thiserror::Error;

/// Crate-wide error type. Variants are grouped by the subsystem that raises
/// them so the CLI can map them onto stable exit codes.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch in {op}: {detail}")]
    DimensionMismatch { op: &'static str, detail: String },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("index {index} out of range for {what} of size {size}")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        size: usize,
    },

    #[error("no gradients populated; run backward before stepping the optimizer")]
    NoGradient,

    #[error("search space validation failed: {0}")]
    SpaceValidation(String),

    #[error("architecture invalid in this space: {0}")]
    InvalidArch(String),

    #[error("cannot decode architecture string {input:?}: {reason}")]
    DecodeError { input: String, reason: String },

    #[error("eval-mode forward for {arch} needs recalibration first")]
    MissingCalibration { arch: String },

    #[error("data error: {0}")]
    Data(String),

    #[error("binary format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },

    #[error("training diverged at step {step}: {term} is not finite")]
    Diverged { step: usize, term: String },

    #[error("no architecture satisfying {constraint} found within {attempts} draws")]
    InfeasibleConstraint { constraint: String, attempts: usize },

    #[error("scoring produced a non-finite value for {arch}")]
    ScoringError { arch: String },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
