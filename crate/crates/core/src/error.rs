use thiserror::Error;

/// Errors raised across the crate.
#[derive(Error, Debug)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// `epsilon = 0` and the second moment of a coordinate is zero.
    #[error("division by zero second moment at coordinate {coordinate}")]
    ZeroSecondMoment { coordinate: usize },

    /// The second moment left the positive half-line during integration.
    #[error("second moment v[{coordinate}] = {value:e} became non-positive at t = {t}; the gradient signal likely vanishes")]
    NonPositiveSecondMoment { t: f64, coordinate: usize, value: f64 },

    #[error("no samples remain after the burn-in window (burn-in ends at t = {burn_in_end})")]
    EmptyWindow { burn_in_end: f64 },

    #[error("degenerate fit: {0}")]
    DegenerateFit(String),

    #[error("invalid schedule: {0}")]
    InvalidSchedule(String),

    #[error("unknown problem kind `{0}`")]
    UnknownProblem(String),

    #[error("series too short: need at least {needed} points, got {got}")]
    SeriesTooShort { needed: usize, got: usize },

    #[error("empty grid")]
    EmptyGrid,

    #[error("parse error at line {line}: {message}")]
    Parse { line: u64, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_dim(expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::DimensionMismatch { expected, found });
    }
    Ok(())
}

pub(crate) fn domain(msg: impl Into<String>) -> Error {
    Error::Domain(msg.into())
}
