use thiserror::Error;

/// Errors raised anywhere in the crate.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("matrix contains NaN or infinite entries")]
    NonFinite,
    #[error("matrix is not positive semi-definite (eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("matrix is not positive definite")]
    NotPd,
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("t = {t} outside domain [{min}, {max}]")]
    OutOfDomain { t: f64, min: f64, max: f64 },
    #[error("design matrix is rank deficient ({rank} < {needed})")]
    RankDeficient { rank: usize, needed: usize },
    #[error("invalid basis: {0}")]
    InvalidBasis(String),
    #[error("invalid curve set: {0}")]
    InvalidCurves(String),
    #[error("unknown model code `{0}`")]
    UnknownModel(String),
    #[error("covariance structure {0} has no closed-form update and is not implemented")]
    Unimplemented(String),
    #[error("degenerate parameters: {0}")]
    Degenerate(String),
    #[error("cluster {cluster} has weight {weight:.3} below the minimum {min}")]
    EmptyCluster { cluster: usize, weight: f64, min: usize },
    #[error("regression design matrix is singular")]
    SingularDesign,
    #[error("initialization failed to produce {0} non-empty clusters")]
    InitFailure(usize),
    #[error("no viable model: every candidate failed or was spurious")]
    NoViableModel,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<csv::Error> for Error {
    fn from(e: csv::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Parse(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, Error>;
