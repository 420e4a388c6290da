use thiserror::Error;

/// Library-wide error type.
#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid parameter: {0}")]
    InvalidParam(String),

    #[error("covariance is not positive definite: {0}")]
    NotSpd(String),

    #[error("singular matrix: {0}")]
    Singular(String),

    #[error("particle weights degenerate at t={t}: {detail}")]
    WeightDegeneracy { t: usize, detail: String },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("training aborted: {0}")]
    Training(String),

    #[error("file format error: {0}")]
    Format(String),

    #[error("schema version mismatch: found {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },

    #[error("config error: {0}")]
    Config(String),

    #[error("modality mismatch: {0}")]
    Modality(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
