use thiserror::Error;

use crate::data::SessionKey;

pub type Result<T> = std::result::Result<T, CmaError>;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum CmaError {
    #[error("length mismatch: z has {z}, m has {m}, r has {r} entries")]
    LengthMismatch { z: usize, m: usize, r: usize },

    #[error("degenerate treatment: z must contain both 0 and 1 (and have nonzero spread)")]
    DegenerateTreatment,

    #[error("too few trials: {n} < 4")]
    TooFewTrials { n: usize },

    #[error("treatment values must be 0 or 1, found {value}")]
    NonBinaryTreatment { value: f64 },

    #[error("non-finite value in {column} at index {index}")]
    NonFinite { column: &'static str, index: usize },

    #[error("delta must lie in (-1, 1), got {0}")]
    InvalidDelta(f64),

    #[error("invalid noise parameters: {0}")]
    InvalidNoise(String),

    #[error("mediator residual variance is not positive ({s11})")]
    SingularResiduals { s11: f64 },

    #[error("residual covariance determinant is negative ({det})")]
    NegativeVariance { det: f64 },

    #[error("design [z m] is singular (relative Gram determinant {rel_det:e})")]
    SingularDesign { rel_det: f64 },

    #[error("session (subject {}, session {}): {source}", key.subject, key.session)]
    Session {
        key: SessionKey,
        #[source]
        source: Box<CmaError>,
    },

    #[error("invalid dataset: {0}")]
    InvalidDataset(String),

    #[error("delta optimization failed: {0}")]
    OptimFailed(String),

    #[error("unknown quantity '{0}'")]
    UnknownQuantity(String),

    #[error("invalid config field '{key}': {reason}")]
    InvalidConfig { key: String, reason: String },

    #[error("{failed} of {total} replicates failed (limit {limit})")]
    TooManyFailures {
        failed: usize,
        total: usize,
        limit: usize,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

impl CmaError {
    pub(crate) fn in_session(self, key: SessionKey) -> Self {
        CmaError::Session {
            key,
            source: Box::new(self),
        }
    }

    /// True for errors caused by bad inputs rather than numerical breakdown.
    pub fn is_validation(&self) -> bool {
        match self {
            CmaError::LengthMismatch { .. }
            | CmaError::DegenerateTreatment
            | CmaError::TooFewTrials { .. }
            | CmaError::NonBinaryTreatment { .. }
            | CmaError::NonFinite { .. }
            | CmaError::InvalidDelta(_)
            | CmaError::InvalidNoise(_)
            | CmaError::InvalidDataset(_)
            | CmaError::UnknownQuantity(_)
            | CmaError::InvalidConfig { .. }
            | CmaError::InvalidArgument(_) => true,
            CmaError::Session { source, .. } => source.is_validation(),
            _ => false,
        }
    }
}
