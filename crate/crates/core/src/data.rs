//! Data model shared by every estimator: one session's trial series, the
//! bivariate noise parameters, path coefficients and the multilevel dataset.
//!
//! All fitting routines operate on [`CenteredSeries`]. Treatment, mediator and
//! outcome are all mean-centered before fitting, which is equivalent to fitting
//! both equations with an intercept and makes `q = z'z / n` estimate
//! `p(1 - p)` for a Bernoulli(p) treatment.

use std::collections::{BTreeMap, HashMap};
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{CmaError, Result};
use crate::numeric::neumaier_sum;

/// Treatment, mediator and outcome vectors of a single session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialSeries {
    pub z: Vec<f64>,
    pub m: Vec<f64>,
    pub r: Vec<f64>,
}

impl TrialSeries {
    /// Builds a validated series.
    pub fn new(z: Vec<f64>, m: Vec<f64>, r: Vec<f64>) -> Result<Self> {
        validate_series(TrialSeries { z, m, r })
    }

    pub fn n(&self) -> usize {
        self.z.len()
    }
}

/// Checks the series invariants and hands the input back untouched.
pub fn validate_series(raw: TrialSeries) -> Result<TrialSeries> {
    let (nz, nm, nr) = (raw.z.len(), raw.m.len(), raw.r.len());
    if nz != nm || nz != nr {
        return Err(CmaError::LengthMismatch {
            z: nz,
            m: nm,
            r: nr,
        });
    }
    if nz < 4 {
        return Err(CmaError::TooFewTrials { n: nz });
    }
    for (column, values) in [("z", &raw.z), ("m", &raw.m), ("r", &raw.r)] {
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(CmaError::NonFinite { column, index });
        }
    }
    if let Some(&value) = raw.z.iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(CmaError::NonBinaryTreatment { value });
    }
    let ones = raw.z.iter().filter(|&&v| v == 1.0).count();
    if ones == 0 || ones == nz {
        return Err(CmaError::DegenerateTreatment);
    }
    Ok(raw)
}

fn center_column(values: &[f64]) -> Vec<f64> {
    if values.is_empty() {
        return Vec::new();
    }
    let n = values.len() as f64;
    let scale = values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    let mean = neumaier_sum(values.iter().copied()) / n;
    // Means at rounding level are left alone so that centering is idempotent.
    if mean.abs() <= 1e-13 * scale {
        return values.to_vec();
    }
    let mut out: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let residual = neumaier_sum(out.iter().copied()) / n;
    if residual.abs() > 1e-13 * scale {
        out.iter_mut().for_each(|v| *v -= residual);
    }
    out
}

/// A session whose three columns each have zero sample mean.
#[derive(Debug, Clone, PartialEq)]
pub struct CenteredSeries(TrialSeries);

impl CenteredSeries {
    pub fn as_series(&self) -> &TrialSeries {
        &self.0
    }

    pub fn into_inner(self) -> TrialSeries {
        self.0
    }

    /// Sufficient cross-products for every closed-form estimator.
    pub fn cross_products(&self) -> CrossProducts {
        let s = &self.0;
        let dot = |a: &[f64], b: &[f64]| neumaier_sum(a.iter().zip(b).map(|(x, y)| x * y));
        CrossProducts {
            n: s.n(),
            zz: dot(&s.z, &s.z),
            zm: dot(&s.z, &s.m),
            zr: dot(&s.z, &s.r),
            mm: dot(&s.m, &s.m),
            mr: dot(&s.m, &s.r),
            rr: dot(&s.r, &s.r),
        }
    }
}

impl Deref for CenteredSeries {
    type Target = TrialSeries;

    fn deref(&self) -> &TrialSeries {
        &self.0
    }
}

/// Mean-centers z, m and r. The input is not modified.
pub fn center(series: &TrialSeries) -> CenteredSeries {
    CenteredSeries(TrialSeries {
        z: center_column(&series.z),
        m: center_column(&series.m),
        r: center_column(&series.r),
    })
}

/// Inner products of the centered columns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrossProducts {
    pub n: usize,
    pub zz: f64,
    pub zm: f64,
    pub zr: f64,
    pub mm: f64,
    pub mr: f64,
    pub rr: f64,
}

/// Error covariance `[[s1^2, d s1 s2], [d s1 s2, s2^2]]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseCov {
    pub sigma1: f64,
    pub sigma2: f64,
    pub delta: f64,
}

impl NoiseCov {
    pub fn new(sigma1: f64, sigma2: f64, delta: f64) -> Result<Self> {
        check_delta(delta)?;
        if !(sigma1 > 0.0 && sigma1.is_finite()) || !(sigma2 > 0.0 && sigma2.is_finite()) {
            return Err(CmaError::InvalidNoise(format!(
                "standard deviations must be positive and finite (sigma1={sigma1}, sigma2={sigma2})"
            )));
        }
        Ok(NoiseCov {
            sigma1,
            sigma2,
            delta,
        })
    }

    /// Builds from variances. A zero outcome variance is allowed (it arises on
    /// perfectly collinear residuals) and only the mediator variance must be positive.
    pub fn from_variances(sigma1_sq: f64, sigma2_sq: f64, delta: f64) -> Result<Self> {
        check_delta(delta)?;
        if !(sigma1_sq > 0.0) || !(sigma2_sq >= 0.0) {
            return Err(CmaError::InvalidNoise(format!(
                "variances out of range (sigma1^2={sigma1_sq}, sigma2^2={sigma2_sq})"
            )));
        }
        Ok(NoiseCov {
            sigma1: sigma1_sq.sqrt(),
            sigma2: sigma2_sq.sqrt(),
            delta,
        })
    }

    pub fn covariance(&self) -> [[f64; 2]; 2] {
        let off = self.delta * self.sigma1 * self.sigma2;
        [[self.sigma1 * self.sigma1, off], [off, self.sigma2 * self.sigma2]]
    }

    pub fn determinant(&self) -> f64 {
        let (v1, v2) = (self.sigma1 * self.sigma1, self.sigma2 * self.sigma2);
        v1 * v2 * (1.0 - self.delta * self.delta)
    }

    pub fn precision(&self) -> [[f64; 2]; 2] {
        let c = self.covariance();
        let det = self.determinant();
        [[c[1][1] / det, -c[0][1] / det], [-c[0][1] / det, c[0][0] / det]]
    }
}

pub(crate) fn check_delta(delta: f64) -> Result<()> {
    if delta.is_finite() && delta.abs() < 1.0 {
        Ok(())
    } else {
        Err(CmaError::InvalidDelta(delta))
    }
}

/// `a`: treatment -> mediator, `b`: mediator -> outcome, `c`: direct,
/// `c_total`: total effect.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PathCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
    pub c_total: f64,
}

/// Sample covariance (divisor n) of the mediator residual and the
/// total-effect residual.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResidualCov {
    pub s11: f64,
    pub s12: f64,
    pub s22: f64,
}

impl ResidualCov {
    pub fn determinant(&self) -> f64 {
        self.s11 * self.s22 - self.s12 * self.s12
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SessionKey {
    pub subject: u32,
    pub session: u32,
}

impl SessionKey {
    pub fn new(subject: u32, session: u32) -> Self {
        SessionKey { subject, session }
    }
}

/// Sessions keyed by (subject, session). Subjects are numbered `1..=N` and
/// sessions `1..=K_i` within each subject.
#[derive(Debug, Clone, PartialEq)]
pub struct MultilevelDataset {
    sessions: BTreeMap<SessionKey, TrialSeries>,
    sessions_per_subject: Vec<usize>,
}

impl MultilevelDataset {
    pub fn new(sessions: BTreeMap<SessionKey, TrialSeries>) -> Result<Self> {
        if sessions.is_empty() {
            return Err(CmaError::InvalidDataset("no sessions".into()));
        }
        let mut counts: Vec<usize> = Vec::new();
        for (key, series) in &sessions {
            if key.subject == 0 || key.session == 0 {
                return Err(CmaError::InvalidDataset(format!(
                    "ids are 1-based, got subject {} session {}",
                    key.subject, key.session
                )));
            }
            let subject = key.subject as usize;
            if subject > counts.len() + 1 || (subject == counts.len() + 1 && key.session != 1) {
                return Err(CmaError::InvalidDataset(format!(
                    "ids must be dense: unexpected subject {} session {}",
                    key.subject, key.session
                )));
            }
            if subject == counts.len() + 1 {
                counts.push(0);
            }
            if key.session as usize != counts[subject - 1] + 1 {
                return Err(CmaError::InvalidDataset(format!(
                    "sessions of subject {} must be numbered 1..K",
                    key.subject
                )));
            }
            counts[subject - 1] += 1;
            validate_series(series.clone()).map_err(|e| e.in_session(*key))?;
        }
        Ok(MultilevelDataset {
            sessions,
            sessions_per_subject: counts,
        })
    }

    /// Maps arbitrary subject/session labels to dense ids in order of first
    /// appearance and builds the dataset.
    pub fn from_labeled<S: AsRef<str>>(labeled: Vec<(S, S, TrialSeries)>) -> Result<Self> {
        let mut subject_ids: HashMap<String, u32> = HashMap::new();
        let mut session_ids: HashMap<(u32, String), u32> = HashMap::new();
        let mut next_session: Vec<u32> = Vec::new();
        let mut sessions = BTreeMap::new();
        for (subject, session, series) in labeled {
            let next = subject_ids.len() as u32 + 1;
            let sid = *subject_ids
                .entry(subject.as_ref().to_string())
                .or_insert_with(|| {
                    next_session.push(0);
                    next
                });
            let slot = &mut next_session[sid as usize - 1];
            let key_label = (sid, session.as_ref().to_string());
            if session_ids.contains_key(&key_label) {
                return Err(CmaError::InvalidDataset(format!(
                    "duplicate session '{}' for subject '{}'",
                    session.as_ref(),
                    subject.as_ref()
                )));
            }
            *slot += 1;
            session_ids.insert(key_label, *slot);
            sessions.insert(SessionKey::new(sid, *slot), series);
        }
        Self::new(sessions)
    }

    pub fn n_subjects(&self) -> usize {
        self.sessions_per_subject.len()
    }

    pub fn n_sessions(&self) -> usize {
        self.sessions.len()
    }

    pub fn sessions_per_subject(&self) -> &[usize] {
        &self.sessions_per_subject
    }

    pub fn sessions(&self) -> &BTreeMap<SessionKey, TrialSeries> {
        &self.sessions
    }

    pub fn iter(&self) -> impl Iterator<Item = (&SessionKey, &TrialSeries)> {
        self.sessions.iter()
    }

    pub fn get(&self, key: &SessionKey) -> Option<&TrialSeries> {
        self.sessions.get(key)
    }

    pub fn total_trials(&self) -> usize {
        self.sessions.values().map(|s| s.n()).sum()
    }
}
