//! Error taxonomy shared by all modules.

use std::fmt;

/// Errors surfaced by dataset handling, estimation and federation.
#[derive(Debug, Clone, PartialEq)]
pub enum Error {
    /// A Gram or design matrix is rank deficient at the requested tolerance
    /// (Condition 1 or 2 violation).
    RankDeficient(String),
    /// An iterative routine exhausted its iteration budget.
    NoConvergence(String),
    /// A covariance matrix is not positive definite (Cholesky failed).
    NotPositiveDefinite(String),
    /// A treatment arm holds no observations.
    EmptyArm(String),
    /// Dummy augmentation requires at least two studies.
    SingleStudy,
    /// Malformed input record; carries a 1-based line number.
    ParseError { line: u64, message: String },
    /// A required column is missing or the header is malformed.
    SchemaError(String),
    /// A value is outside its domain (non-binary treatment, non-finite number).
    ValueError { line: u64, message: String },
    /// An arm is too small or degenerate for a plug-in variance.
    DegenerateArm(String),
    /// An inverse-variance weight would be infinite.
    ZeroVariance(String),
    /// FedAvg parameters exceeded the divergence guard.
    Divergence(String),
    /// A closed-form variance was requested outside its validity region.
    FormulaInvalid(String),
    /// Dimensions are inconsistent with the requested operation.
    DimensionError(String),
    /// Underlying I/O failure.
    IoError(String),
}

impl fmt::Display for Error {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Error::RankDeficient(m) => write!(f, "rank deficient: {m}"),
            Error::NoConvergence(m) => write!(f, "no convergence: {m}"),
            Error::NotPositiveDefinite(m) => write!(f, "not positive definite: {m}"),
            Error::EmptyArm(m) => write!(f, "empty treatment arm: {m}"),
            Error::SingleStudy => write!(f, "dummy augmentation needs at least 2 studies"),
            Error::ParseError { line, message } => write!(f, "parse error at line {line}: {message}"),
            Error::SchemaError(m) => write!(f, "schema error: {m}"),
            Error::ValueError { line, message } => write!(f, "value error at line {line}: {message}"),
            Error::DegenerateArm(m) => write!(f, "degenerate arm: {m}"),
            Error::ZeroVariance(m) => write!(f, "zero variance weight: {m}"),
            Error::Divergence(m) => write!(f, "divergence: {m}"),
            Error::FormulaInvalid(m) => write!(f, "formula invalid: {m}"),
            Error::DimensionError(m) => write!(f, "dimension error: {m}"),
            Error::IoError(m) => write!(f, "io error: {m}"),
        }
    }
}

impl std::error::Error for Error {}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::IoError(e.to_string())
    }
}

impl Error {
    /// True for failures of numerical preconditions rather than bad input;
    /// the CLI maps these to exit code 3, everything else to 2.
    pub fn is_numerical(&self) -> bool {
        matches!(
            self,
            Error::RankDeficient(_)
                | Error::NoConvergence(_)
                | Error::NotPositiveDefinite(_)
                | Error::DegenerateArm(_)
                | Error::ZeroVariance(_)
                | Error::Divergence(_)
                | Error::FormulaInvalid(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;
