//! Mediation analysis when the mediator and outcome equations have correlated
//! errors.
//!
//! * [`single_level`]: closed-form estimates for one session at a given error
//!   correlation, with asymptotic covariances.
//! * [`multilevel`]: three procedures that estimate the correlation from
//!   repeated sessions (mixed-model likelihood profiling, profile
//!   h-likelihood, two-step REML) and their hybrid.
//! * [`inference`]: asymptotic and wild-bootstrap confidence intervals.
//! * [`simulate`]: seeded generators and a Monte Carlo driver.

pub mod data;
pub mod error;
pub mod inference;
pub mod lmm;
pub mod multilevel;
pub mod numeric;
pub mod simulate;
pub mod single_level;

pub use data::{
    center, validate_series, CenteredSeries, MultilevelDataset, NoiseCov, PathCoefficients,
    ResidualCov, SessionKey, TrialSeries,
};
pub use error::{CmaError, Result};
