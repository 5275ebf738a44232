use thiserror::Error;

/// Errors raised by lattice construction, sampling, propagation and the runners.
#[derive(Debug, Error)]
pub enum Error {
    #[error("n must be even ≥ 8 (got {0})")]
    BadLatticeSize(usize),
    #[error("lattice spacing must be positive and finite (got {0})")]
    BadSpacing(f64),
    #[error("lattice mismatch: {0}")]
    LatticeMismatch(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("wrap-safety violated: {0}")]
    WrapSafety(String),
    #[error("support violation: {0}")]
    Support(String),
    #[error("unknown probe: {0}")]
    UnknownProbe(String),
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("format error: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
