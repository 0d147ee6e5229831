use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("dimension mismatch in {context}: expected {expected}, got {got}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("invalid parameter {name}: {reason}")]
    InvalidParameter { name: &'static str, reason: String },
    #[error("norm bound violated for {what}: {value} > {bound}")]
    BoundViolated {
        what: &'static str,
        value: f64,
        bound: f64,
    },
    #[error("replay stream exhausted at t = {t} (holds {len} rows)")]
    ReplayExhausted { t: usize, len: usize },
    #[error("disturbance at time {t} is outside the buffer window")]
    OutOfWindow { t: i64 },
    #[error("eigendecomposition failed for policy block {block}")]
    DecompositionFailed { block: usize },
    #[error("certificate rejected: {0}")]
    CertificateRejected(String),
    #[error("state bound diverges; increase H")]
    StateBoundDiverges,
    #[error("state norm {norm} exceeds abort threshold {threshold} at t = {t}")]
    StateDiverged { t: usize, norm: f64, threshold: f64 },
    #[error("matrix is numerically singular: {0}")]
    Singular(&'static str),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty candidate set")]
    EmptyCandidates,
    #[error("io: {0}")]
    Io(String),
    #[error("csv: {0}")]
    Csv(String),
}

pub type Result<T, E = ControlError> = std::result::Result<T, E>;

impl From<std::io::Error> for ControlError {
    fn from(e: std::io::Error) -> Self {
        ControlError::Io(e.to_string())
    }
}

impl From<csv::Error> for ControlError {
    fn from(e: csv::Error) -> Self {
        ControlError::Csv(e.to_string())
    }
}

pub(crate) fn check_dim(context: &'static str, expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(ControlError::DimensionMismatch {
            context,
            expected,
            got,
        })
    }
}
