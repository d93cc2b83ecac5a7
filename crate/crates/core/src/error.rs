use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported dimension {0} (expected 2 or 3)")]
    UnsupportedDimension(usize),

    #[error("connection restricted to contractible loops evaluated on winding {0:?}")]
    WindingViolation(Vec<i64>),

    #[error("coefficient matrix A_{index} is not skew-adjoint (defect {defect:.3e})")]
    NotSkewAdjoint { index: usize, defect: f64 },

    #[error("t = {t} is below the certified floor {floor} of this spectral model")]
    BelowCertifiedFloor { t: f64, floor: f64 },

    #[error("incompatible models: {0}")]
    IncompatibleModels(String),

    #[error("section mode {0:?} lies outside the mode cutoff")]
    ModeOutOfBand(Vec<i64>),

    #[error("rank mismatch: expected {expected}, found {found}")]
    RankMismatch { expected: usize, found: usize },

    #[error("ensemble member {0} has no oracle value")]
    MissingOracle(usize),

    #[error("snapshot format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(Error::InvalidInput(msg()))
    }
}
