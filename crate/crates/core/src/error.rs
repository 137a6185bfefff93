use thiserror::Error;

/// Errors raised across the estimation pipeline.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("invalid nuisance value: {0}")]
    Nuisance(String),

    #[error("score/estimand mismatch: {0}")]
    EstimandMismatch(String),

    /// The pooled Jacobian (or a fold Jacobian) is numerically singular.
    #[error("identification failure{}: smallest singular value {smallest_singular_value:e}", fold.map(|k| format!(" in fold {k}")).unwrap_or_default())]
    Identification {
        smallest_singular_value: f64,
        fold: Option<usize>,
    },

    #[error("distribution error: {0}")]
    Dgp(String),

    #[error("model fit failed: {0}")]
    Fit(String),

    #[error("ingest error: {0}")]
    Ingest(String),

    /// Not enough data (or not enough variety in the data) to report an interval yet.
    #[error("not ready: {0}")]
    NotReady(String),

    #[error("streams out of sync: {0}")]
    Synchronization(String),

    #[error("model format error: {0}")]
    Format(String),
}

pub type Result<T> = std::result::Result<T, Error>;
