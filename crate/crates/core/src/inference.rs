//! Confidence intervals: normal-theory intervals for single-session fits and
//! bias-corrected percentile intervals from a trial-level wild bootstrap.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MultilevelDataset, PathCoefficients, SessionKey, TrialSeries};
use crate::error::{CmaError, Result};
use crate::multilevel::fit_method;
use crate::numeric::{mean, norm_cdf, norm_quantile, sample_sd};
use crate::simulate::{multilevel_values, single_values, stream, Estimator, Quantity};
use crate::single_level::{fit_single, SingleLevelFit};

/// Quantities recorded for every bootstrap replicate.
pub const BOOTSTRAP_TARGETS: [Quantity; 7] = [
    Quantity::Delta,
    Quantity::A,
    Quantity::C,
    Quantity::B,
    Quantity::CTotal,
    Quantity::AbProd,
    Quantity::AbDiff,
];

/// Fewest successful replicates accepted by [`bc_interval`].
pub const MIN_INTERVAL_REPLICATES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    Asymptotic,
    WildBc,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntervalEstimate {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub level: f64,
    pub method: IntervalMethod,
}

impl IntervalEstimate {
    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn contains(&self, x: f64) -> bool {
        self.lower <= x && x <= self.upper
    }
}

fn check_level(level: f64) -> Result<()> {
    if level > 0.0 && level < 1.0 {
        Ok(())
    } else {
        Err(CmaError::InvalidArgument(format!(
            "confidence level must lie in (0, 1), got {level}"
        )))
    }
}

/// Estimate and asymptotic variance of `quantity` from a single-session fit.
pub fn asymptotic_moments(fit: &SingleLevelFit, quantity: Quantity) -> Result<(f64, f64)> {
    let v = &fit.asym_cov_theta;
    let t = &fit.theta;
    match quantity {
        Quantity::A => Ok((t.a, v[0][0])),
        Quantity::C => Ok((t.c, v[1][1])),
        Quantity::B => Ok((t.b, v[2][2])),
        Quantity::CTotal => Ok((t.c_total, fit.asym_cov_total[0][0])),
        Quantity::AbProd => Ok((fit.indirect_prod, fit.indirect_var)),
        Quantity::AbDiff => Ok((fit.indirect_diff, fit.indirect_var)),
        other => Err(CmaError::UnknownQuantity(format!(
            "{} has no single-level asymptotic variance",
            other.name()
        ))),
    }
}

/// `point ± z·se` with `z` the `(1 + level)/2` normal quantile.
pub fn asymptotic_ci(fit: &SingleLevelFit, quantity: Quantity, level: f64) -> Result<IntervalEstimate> {
    check_level(level)?;
    let (point, var) = asymptotic_moments(fit, quantity)?;
    // Round-off can leave a tiny negative variance at a degenerate fit.
    let half = norm_quantile(0.5 + level / 2.0) * var.max(0.0).sqrt();
    Ok(IntervalEstimate {
        point,
        lower: point - half,
        upper: point + half,
        level,
        method: IntervalMethod::Asymptotic,
    })
}

/// One session's centered design and residuals under fitted coefficients.
#[derive(Debug, Clone, PartialEq)]
struct SessionResiduals {
    z: Vec<f64>,
    zc: Vec<f64>,
    m_mean: f64,
    r_mean: f64,
    coef: PathCoefficients,
    e1: Vec<f64>,
    e2: Vec<f64>,
}

impl SessionResiduals {
    fn new(series: &TrialSeries, coef: PathCoefficients) -> Self {
        let z_mean = mean(&series.z);
        let m_mean = mean(&series.m);
        let r_mean = mean(&series.r);
        let zc: Vec<f64> = series.z.iter().map(|z| z - z_mean).collect();
        let mut e1 = Vec::with_capacity(series.n());
        let mut e2 = Vec::with_capacity(series.n());
        for t in 0..series.n() {
            let mc = series.m[t] - m_mean;
            e1.push(mc - coef.a * zc[t]);
            e2.push(series.r[t] - r_mean - coef.c * zc[t] - coef.b * mc);
        }
        Self {
            z: series.z.clone(),
            zc,
            m_mean,
            r_mean,
            coef,
            e1,
            e2,
        }
    }

    /// Rebuilds `(M*, R*)` with trial weights `w`. `R*` uses the rebuilt
    /// mediator so the `B` path is exercised.
    fn rebuild(&self, w: &[f64]) -> TrialSeries {
        let n = self.z.len();
        let mut m = Vec::with_capacity(n);
        let mut r = Vec::with_capacity(n);
        for t in 0..n {
            let mc = self.coef.a * self.zc[t] + w[t] * self.e1[t];
            m.push(self.m_mean + mc);
            r.push(self.r_mean + self.coef.c * self.zc[t] + self.coef.b * mc + w[t] * self.e2[t]);
        }
        TrialSeries {
            z: self.z.clone(),
            m,
            r,
        }
    }
}

/// Trial-level wild resampling of a dataset around fitted per-session
/// coefficients. Each trial's residual pair shares one Rademacher weight.
#[derive(Debug, Clone, PartialEq)]
pub struct WildResampler {
    sessions: BTreeMap<SessionKey, SessionResiduals>,
}

impl WildResampler {
    /// `coefs` must hold an entry for every session of `data`.
    pub fn new(data: &MultilevelDataset, coefs: &BTreeMap<SessionKey, PathCoefficients>) -> Result<Self> {
        let sessions = data
            .iter()
            .map(|(key, series)| {
                let coef = coefs.get(key).ok_or_else(|| {
                    CmaError::InvalidArgument(format!(
                        "no fitted coefficients for subject {} session {}",
                        key.subject, key.session
                    ))
                })?;
                Ok((*key, SessionResiduals::new(series, *coef)))
            })
            .collect::<Result<_>>()?;
        Ok(Self { sessions })
    }

    /// Residual pairs `(e1, e2)` of one session.
    pub fn residuals(&self, key: &SessionKey) -> Option<(&[f64], &[f64])> {
        self.sessions.get(key).map(|s| (s.e1.as_slice(), s.e2.as_slice()))
    }

    /// The dataset rebuilt with the given weights, one vector per session in
    /// key order.
    pub fn rebuild_with(&self, weights: &[Vec<f64>]) -> Result<MultilevelDataset> {
        if weights.len() != self.sessions.len() {
            return Err(CmaError::InvalidArgument(format!(
                "{} weight vectors for {} sessions",
                weights.len(),
                self.sessions.len()
            )));
        }
        let mut out = BTreeMap::new();
        for ((key, s), w) in self.sessions.iter().zip(weights) {
            if w.len() != s.z.len() {
                return Err(CmaError::InvalidArgument(format!(
                    "subject {} session {}: {} weights for {} trials",
                    key.subject,
                    key.session,
                    w.len(),
                    s.z.len()
                )));
            }
            out.insert(*key, s.rebuild(w));
        }
        MultilevelDataset::new(out)
    }

    /// Rademacher weights of replicate `index`, drawn from stream `(4, index)`
    /// of `seed`, session by session in key order.
    pub fn weights(&self, seed: u64, index: usize) -> Vec<Vec<f64>> {
        let mut rng = stream(seed, &[4, index as u64]);
        self.sessions
            .values()
            .map(|s| {
                (0..s.z.len())
                    .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
                    .collect()
            })
            .collect()
    }

    pub fn replicate(&self, seed: u64, index: usize) -> Result<MultilevelDataset> {
        self.rebuild_with(&self.weights(seed, index))
    }
}

type Estimates = BTreeMap<Quantity, f64>;

fn targets_of(mut values: Estimates, delta: f64) -> Estimates {
    values.insert(Quantity::Delta, delta);
    values.retain(|q, _| BOOTSTRAP_TARGETS.contains(q));
    values
}

/// Point estimates of the bootstrap targets and the per-session coefficients
/// whose residuals drive the resampling.
fn estimate(
    data: &MultilevelDataset,
    estimator: &Estimator,
) -> Result<(Estimates, BTreeMap<SessionKey, PathCoefficients>)> {
    match *estimator {
        Estimator::Single { delta } => {
            if data.n_sessions() != 1 {
                return Err(CmaError::InvalidArgument(format!(
                    "single-level estimator needs exactly one session, got {}",
                    data.n_sessions()
                )));
            }
            let (key, series) = data.iter().next().expect("one session");
            let fit = fit_single(series, delta).map_err(|e| e.in_session(*key))?;
            let coefs = BTreeMap::from([(*key, fit.theta)]);
            Ok((targets_of(single_values(&fit), delta), coefs))
        }
        Estimator::Multilevel { method, delta } => {
            let fit = fit_method(data, method, delta)?;
            let coefs = fit
                .per_session
                .sessions
                .iter()
                .map(|s| (s.key, s.coef))
                .collect();
            Ok((targets_of(multilevel_values(&fit), fit.delta_hat), coefs))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateFailure {
    pub index: usize,
    pub message: String,
}

/// Distribution summary of one target over the successful replicates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSummary {
    pub quantity: Quantity,
    pub point: f64,
    pub mean: f64,
    pub sd: f64,
    /// `2·point − mean`.
    pub bias_corrected_mean: f64,
    /// Clamped bias-correction constant.
    pub z0: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BootstrapRun {
    pub estimator: Estimator,
    /// Requested number of replicates `B`.
    pub n_replicates: usize,
    pub seed: u64,
    pub point: BTreeMap<Quantity, f64>,
    /// Successful replicate values in replicate order.
    pub replicate_estimates: BTreeMap<Quantity, Vec<f64>>,
    pub failures: Vec<ReplicateFailure>,
    pub summaries: Vec<BootstrapSummary>,
}

impl BootstrapRun {
    pub fn n_ok(&self) -> usize {
        self.n_replicates - self.failures.len()
    }

    pub fn summary(&self, quantity: Quantity) -> Option<&BootstrapSummary> {
        self.summaries.iter().find(|s| s.quantity == quantity)
    }

    fn values(&self, quantity: Quantity) -> Result<(f64, &[f64])> {
        match (self.point.get(&quantity), self.replicate_estimates.get(&quantity)) {
            (Some(p), Some(v)) => Ok((*p, v)),
            _ => Err(CmaError::UnknownQuantity(format!(
                "{} was not bootstrapped",
                quantity.name()
            ))),
        }
    }
}

/// Replicates allowed to fail before the run is abandoned.
pub fn failure_limit(n_replicates: usize) -> usize {
    n_replicates / 10
}

/// Wild bootstrap of `estimator` on `data`: every replicate resamples
/// trial residuals and reruns the full estimator, including `delta` when the
/// estimator estimates it. Results depend only on the inputs and `seed`.
pub fn wild_bootstrap(
    data: &MultilevelDataset,
    estimator: &Estimator,
    n_replicates: usize,
    seed: u64,
) -> Result<BootstrapRun> {
    if n_replicates == 0 {
        return Err(CmaError::InvalidArgument("need at least one replicate".into()));
    }
    let (point, coefs) = estimate(data, estimator)?;
    let resampler = WildResampler::new(data, &coefs)?;

    let outcomes: Vec<Result<Estimates>> = (0..n_replicates)
        .into_par_iter()
        .map(|j| {
            let replicate = resampler.replicate(seed, j)?;
            estimate(&replicate, estimator).map(|(v, _)| v)
        })
        .collect();

    let mut replicate_estimates: BTreeMap<Quantity, Vec<f64>> =
        point.keys().map(|q| (*q, Vec::with_capacity(n_replicates))).collect();
    let mut failures = Vec::new();
    for (index, outcome) in outcomes.into_iter().enumerate() {
        match outcome {
            Ok(values) => {
                for (q, store) in replicate_estimates.iter_mut() {
                    store.push(values.get(q).copied().unwrap_or(f64::NAN));
                }
            }
            Err(e) => failures.push(ReplicateFailure {
                index,
                message: e.to_string(),
            }),
        }
    }
    let limit = failure_limit(n_replicates);
    if failures.len() > limit {
        return Err(CmaError::TooManyFailures {
            failed: failures.len(),
            total: n_replicates,
            limit,
        });
    }

    let summaries = point
        .iter()
        .filter_map(|(q, &p)| {
            let values = &replicate_estimates[q];
            if values.is_empty() {
                return None;
            }
            let m = mean(values);
            Some(BootstrapSummary {
                quantity: *q,
                point: p,
                mean: m,
                sd: if values.len() > 1 { sample_sd(values) } else { 0.0 },
                bias_corrected_mean: 2.0 * p - m,
                z0: bias_constant(values, p),
            })
        })
        .collect();

    Ok(BootstrapRun {
        estimator: *estimator,
        n_replicates,
        seed,
        point,
        replicate_estimates,
        failures,
        summaries,
    })
}

/// `Φ⁻¹` of the fraction of replicates strictly below `point`, clamped to
/// `±Φ⁻¹(1 − 1/(2B))`.
pub fn bias_constant(replicates: &[f64], point: f64) -> f64 {
    let b = replicates.len() as f64;
    let below = replicates.iter().filter(|&&v| v < point).count() as f64;
    let cap = norm_quantile(1.0 - 0.5 / b);
    norm_quantile(below / b).clamp(-cap, cap)
}

/// Sample quantile with linear interpolation between order statistics
/// (`h = (B − 1)p`).
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Bias-corrected percentile interval from raw replicate values. A
/// degenerate distribution (all replicates equal) yields a zero-width
/// interval at the common value.
pub fn bc_interval_from(replicates: &[f64], point: f64, level: f64) -> Result<IntervalEstimate> {
    check_level(level)?;
    if replicates.is_empty() {
        return Err(CmaError::InvalidArgument("no replicates".into()));
    }
    if let Some(i) = replicates.iter().position(|v| !v.is_finite()) {
        return Err(CmaError::InvalidArgument(format!(
            "replicate {i} is not finite"
        )));
    }
    let mut sorted = replicates.to_vec();
    sorted.sort_by(f64::total_cmp);
    let interval = |lower, upper| IntervalEstimate {
        point,
        lower,
        upper,
        level,
        method: IntervalMethod::WildBc,
    };
    if sorted[0] == sorted[sorted.len() - 1] {
        return Ok(interval(sorted[0], sorted[0]));
    }
    let z0 = bias_constant(replicates, point);
    let z = norm_quantile(0.5 + level / 2.0);
    let lower = quantile_sorted(&sorted, norm_cdf(2.0 * z0 - z));
    let upper = quantile_sorted(&sorted, norm_cdf(2.0 * z0 + z));
    Ok(interval(lower, upper))
}

/// Bias-corrected percentile interval for one target of a bootstrap run.
/// Requires at least [`MIN_INTERVAL_REPLICATES`] successful replicates.
pub fn bc_interval(run: &BootstrapRun, quantity: Quantity, level: f64) -> Result<IntervalEstimate> {
    let (point, values) = run.values(quantity)?;
    if values.len() < MIN_INTERVAL_REPLICATES {
        return Err(CmaError::InvalidArgument(format!(
            "{} replicates; intervals need at least {MIN_INTERVAL_REPLICATES}",
            values.len()
        )));
    }
    bc_interval_from(values, point, level)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::multilevel::Method;
    use crate::simulate::{gen_multilevel, gen_single, MultilevelConfig, SingleLevelConfig, Triple};

    fn one_session(series: TrialSeries) -> MultilevelDataset {
        MultilevelDataset::new(BTreeMap::from([(SessionKey::new(1, 1), series)])).unwrap()
    }

    fn table1_fit(seed: u64) -> SingleLevelFit {
        let cfg = SingleLevelConfig {
            seed,
            ..SingleLevelConfig::default()
        };
        fit_single(&gen_single(&cfg).unwrap(), 0.5).unwrap()
    }

    #[test]
    fn asymptotic_half_width_is_normal_quantile_times_se() {
        let mut fit = table1_fit(1);
        fit.asym_cov_theta[0][0] = 0.04;
        let ci = asymptotic_ci(&fit, Quantity::A, 0.95).unwrap();
        let half = 1.959_963_984_540_054 * 0.2;
        assert!((ci.upper - ci.point - half).abs() < 1e-12);
        assert!((ci.point - ci.lower - half).abs() < 1e-12);
        assert_eq!(ci.method, IntervalMethod::Asymptotic);
    }

    #[test]
    fn zero_variance_gives_zero_width() {
        let mut fit = table1_fit(2);
        fit.indirect_var = 0.0;
        let ci = asymptotic_ci(&fit, Quantity::AbProd, 0.9).unwrap();
        assert_eq!(ci.lower, ci.point);
        assert_eq!(ci.upper, ci.point);
    }

    #[test]
    fn asymptotic_rejects_unknown_quantity_and_level() {
        let fit = table1_fit(3);
        assert!(matches!(
            asymptotic_ci(&fit, Quantity::Delta, 0.95),
            Err(CmaError::UnknownQuantity(_))
        ));
        assert!(matches!(
            asymptotic_ci(&fit, Quantity::A, 1.0),
            Err(CmaError::InvalidArgument(_))
        ));
        assert!(matches!(
            "gamma".parse::<Quantity>(),
            Err(CmaError::UnknownQuantity(_))
        ));
        assert_eq!("ab_p".parse::<Quantity>().unwrap(), Quantity::AbProd);
    }

    #[test]
    fn bc_hand_example() {
        // z0 = Φ⁻¹(2/7); endpoints interpolated at Φ(2z0 ∓ 1.645).
        let reps = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0];
        assert!((bias_constant(&reps, 3.0) + 0.565_948_821_932_863_1).abs() < 1e-9);
        let ci = bc_interval_from(&reps, 3.0, 0.9).unwrap();
        assert!((ci.lower - 1.016_471_553_310_524_6).abs() < 1e-8, "{}", ci.lower);
        assert!((ci.upper - 5.176_053_666_125_715).abs() < 1e-8, "{}", ci.upper);
    }

    #[test]
    fn bc_symmetric_is_plain_percentile() {
        let reps: Vec<f64> = (0..201).map(|i| i as f64 - 100.0).collect();
        let mut shuffled = reps.clone();
        shuffled.reverse();
        // 100 of 201 below zero: z0 = Φ⁻¹(100/201), close to but not zero.
        let z0 = bias_constant(&shuffled, 0.0);
        assert!(z0.abs() < 0.01);
        let even: Vec<f64> = (0..200).map(|i| i as f64 - 99.5).collect();
        assert_eq!(bias_constant(&even, 0.0), 0.0);
        let ci = bc_interval_from(&even, 0.0, 0.9).unwrap();
        let z = norm_quantile(0.95);
        assert!((ci.lower - quantile_sorted(&even, norm_cdf(-z))).abs() < 1e-12);
        assert!((ci.lower + ci.upper).abs() < 1e-9);
    }

    #[test]
    fn bc_clamps_when_all_replicates_exceed_point() {
        let reps = [2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0];
        let z0 = bias_constant(&reps, 1.0);
        assert!((z0 + 1.465_233_792_685_523).abs() < 1e-9);
        let ci = bc_interval_from(&reps, 1.0, 0.95).unwrap();
        assert!(ci.lower >= 2.0 && ci.lower <= ci.upper);
        assert!(!ci.contains(1.0));
    }

    #[test]
    fn bc_all_equal_is_zero_width() {
        let ci = bc_interval_from(&[4.0; 150], 4.0, 0.95).unwrap();
        assert_eq!((ci.lower, ci.upper), (4.0, 4.0));
    }

    #[test]
    fn unit_weights_rebuild_original_data() {
        let cfg = MultilevelConfig {
            n_subjects: 3,
            n_sessions: 2,
            trial_mean: 30.0,
            seed: 8,
            ..MultilevelConfig::default()
        };
        let data = gen_multilevel(&cfg).unwrap();
        let coefs: BTreeMap<SessionKey, PathCoefficients> = data
            .iter()
            .map(|(k, s)| (*k, fit_single(s, 0.3).unwrap().theta))
            .collect();
        let rs = WildResampler::new(&data, &coefs).unwrap();
        let ones: Vec<Vec<f64>> = data.iter().map(|(_, s)| vec![1.0; s.n()]).collect();
        let back = rs.rebuild_with(&ones).unwrap();
        for ((_, a), (_, b)) in data.iter().zip(back.iter()) {
            assert_eq!(a.z, b.z);
            for t in 0..a.n() {
                assert!((a.m[t] - b.m[t]).abs() < 1e-10 * (1.0 + a.m[t].abs()));
                assert!((a.r[t] - b.r[t]).abs() < 1e-10 * (1.0 + a.r[t].abs()));
            }
        }
    }

    #[test]
    fn weights_are_rademacher_and_seeded() {
        let series = gen_single(&SingleLevelConfig::default()).unwrap();
        let data = one_session(series.clone());
        let coefs = BTreeMap::from([(SessionKey::new(1, 1), fit_single(&series, 0.5).unwrap().theta)]);
        let rs = WildResampler::new(&data, &coefs).unwrap();
        let w = rs.weights(11, 3);
        assert_eq!(w, rs.weights(11, 3));
        assert_ne!(w, rs.weights(11, 4));
        assert!(w[0].iter().all(|&x| x == 1.0 || x == -1.0));
    }

    #[test]
    fn missing_coefficients_rejected() {
        let data = one_session(gen_single(&SingleLevelConfig::default()).unwrap());
        assert!(WildResampler::new(&data, &BTreeMap::new()).is_err());
    }

    #[test]
    fn single_estimator_needs_one_session() {
        let cfg = MultilevelConfig {
            n_subjects: 2,
            n_sessions: 1,
            seed: 2,
            ..MultilevelConfig::default()
        };
        let data = gen_multilevel(&cfg).unwrap();
        let est = Estimator::Single { delta: 0.0 };
        assert!(matches!(
            wild_bootstrap(&data, &est, 10, 1),
            Err(CmaError::InvalidArgument(_))
        ));
    }

    #[test]
    fn bootstrap_is_deterministic_and_fixes_known_delta() {
        let cfg = MultilevelConfig {
            n_subjects: 4,
            n_sessions: 2,
            trial_mean: 40.0,
            fixed: Triple::new(1.0, 0.5, 0.2),
            seed: 31,
            ..MultilevelConfig::default()
        };
        let data = gen_multilevel(&cfg).unwrap();
        let est = Estimator::Multilevel {
            method: Method::Ts,
            delta: Some(0.3),
        };
        let a = wild_bootstrap(&data, &est, 40, 5).unwrap();
        let b = wild_bootstrap(&data, &est, 40, 5).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.n_ok(), 40);
        assert!(a.replicate_estimates[&Quantity::Delta].iter().all(|&d| d == 0.3));
        let c = wild_bootstrap(&data, &est, 40, 6).unwrap();
        assert_ne!(a.replicate_estimates, c.replicate_estimates);
        let s = a.summary(Quantity::A).unwrap();
        assert!((s.bias_corrected_mean - (2.0 * s.point - s.mean)).abs() < 1e-12);
        assert!(matches!(
            bc_interval(&a, Quantity::A, 0.95),
            Err(CmaError::InvalidArgument(_))
        ));
    }
}
