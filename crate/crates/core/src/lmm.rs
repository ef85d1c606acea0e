//! Gaussian random-intercept model `y_ik = mu + u_i + e_ik`, fitted by maximum
//! likelihood or REML.
//!
//! The mean is profiled out by generalized least squares and the residual
//! variance in closed form, leaving a one-dimensional search over the ratio
//! `var_between / var_within` (on a log scale, with the zero boundary checked
//! separately). When the within-subject variance collapses it is held at
//! [`VAR_WITHIN_FLOOR`] and the between-subject variance is searched directly.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{CmaError, Result};
use crate::numeric::{brent_maximize, neumaier_sum};

pub const VAR_WITHIN_FLOOR: f64 = 1e-12;

const LOG_RATIO_MIN: f64 = -30.0;
const LOG_RATIO_MAX: f64 = 30.0;
const GRID_POINTS: usize = 121;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Criterion {
    Ml,
    Reml,
}

/// Session-level values of one coefficient, grouped by subject.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupedValues {
    groups: Vec<Vec<f64>>,
}

impl GroupedValues {
    pub fn new(groups: Vec<Vec<f64>>) -> Result<Self> {
        if groups.len() < 2 {
            return Err(CmaError::InvalidDataset(
                "random-intercept fit needs at least 2 subjects".into(),
            ));
        }
        if groups.iter().any(|g| g.is_empty()) {
            return Err(CmaError::InvalidDataset("every subject needs at least one value".into()));
        }
        if groups.iter().flatten().any(|v| !v.is_finite()) {
            return Err(CmaError::InvalidDataset("non-finite value in grouped data".into()));
        }
        Ok(GroupedValues { groups })
    }

    pub fn n_subjects(&self) -> usize {
        self.groups.len()
    }

    pub fn counts(&self) -> Vec<usize> {
        self.groups.iter().map(|g| g.len()).collect()
    }

    pub fn groups(&self) -> &[Vec<f64>] {
        &self.groups
    }

    fn n_total(&self) -> usize {
        self.groups.iter().map(|g| g.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomInterceptFit {
    pub mean: f64,
    pub var_between: f64,
    pub var_within: f64,
    pub loglik: f64,
    /// Empirical-Bayes predictions of `u_i`, by subject index.
    pub blups: Vec<f64>,
    pub criterion: Criterion,
    /// Set when the data carry no within-subject spread and `var_within`
    /// sits at its floor.
    pub degenerate: bool,
}

impl RandomInterceptFit {
    /// Standard error of the fixed mean, from the GLS information.
    pub fn mean_se(&self, data: &GroupedValues) -> f64 {
        let info: f64 = data
            .groups
            .iter()
            .map(|g| g.len() as f64 / (self.var_within + g.len() as f64 * self.var_between))
            .sum();
        (1.0 / info).sqrt()
    }
}

/// Per-subject summaries: count, mean, within sum of squares.
struct Summary {
    k: f64,
    mean: f64,
    ssw: f64,
}

fn summaries(data: &GroupedValues) -> Vec<Summary> {
    data.groups
        .iter()
        .map(|g| {
            let k = g.len() as f64;
            let mean = neumaier_sum(g.iter().copied()) / k;
            let ssw = neumaier_sum(g.iter().map(|v| (v - mean) * (v - mean)));
            Summary { k, mean, ssw }
        })
        .collect()
}

fn gls_mean(sums: &[Summary], var_between: f64, var_within: f64) -> (f64, f64) {
    let mut num = 0.0;
    let mut den = 0.0;
    for s in sums {
        let w = s.k / (var_within + s.k * var_between);
        num += w * s.mean;
        den += w;
    }
    (num / den, den)
}

fn loglik_from(sums: &[Summary], mean: f64, vb: f64, vw: f64, criterion: Criterion) -> f64 {
    let n: f64 = sums.iter().map(|s| s.k).sum();
    let mut logdet = 0.0;
    let mut quad = 0.0;
    let mut info = 0.0;
    for s in sums {
        let tot = vw + s.k * vb;
        logdet += (s.k - 1.0) * vw.ln() + tot.ln();
        quad += s.ssw / vw + s.k * (s.mean - mean).powi(2) / tot;
        info += s.k / tot;
    }
    match criterion {
        Criterion::Ml => -0.5 * (n * (2.0 * PI).ln() + logdet + quad),
        Criterion::Reml => -0.5 * ((n - 1.0) * (2.0 * PI).ln() + logdet + info.ln() + quad),
    }
}

/// Exact Gaussian (restricted) log-likelihood with all constants. For REML the
/// quadratic term is evaluated at the supplied `mean`, which gives the usual
/// restricted likelihood when `mean` is the GLS estimate.
pub fn loglik_at(
    data: &GroupedValues,
    mean: f64,
    var_between: f64,
    var_within: f64,
    criterion: Criterion,
) -> f64 {
    loglik_from(&summaries(data), mean, var_between, var_within, criterion)
}

/// Objective with `mean` and `var_within` profiled, as a function of the
/// log variance ratio. Returns `(objective, var_within)`.
fn profiled(sums: &[Summary], n: f64, log_ratio: Option<f64>, criterion: Criterion) -> (f64, f64) {
    let ratio = log_ratio.map_or(0.0, f64::exp);
    let mut num = 0.0;
    let mut den = 0.0;
    for s in sums {
        let w = s.k / (1.0 + s.k * ratio);
        num += w * s.mean;
        den += w;
    }
    let mu = num / den;
    let q: f64 = sums
        .iter()
        .map(|s| s.ssw + s.k / (1.0 + s.k * ratio) * (s.mean - mu).powi(2))
        .sum();
    let dof = match criterion {
        Criterion::Ml => n,
        Criterion::Reml => n - 1.0,
    };
    let vw = q / dof;
    if !(vw > 0.0) {
        return (f64::INFINITY, 0.0);
    }
    (loglik_from(sums, mu, ratio * vw, vw, criterion), vw)
}

/// Maximizes `f` over `x >= 0` by a grid over `ln x`, the boundary `x = 0`
/// and Brent refinement. Returns `(x, f(x), hit_upper_edge)`.
fn maximize_nonneg<F: Fn(Option<f64>) -> f64>(f: F) -> (f64, f64, bool) {
    let step = (LOG_RATIO_MAX - LOG_RATIO_MIN) / (GRID_POINTS - 1) as f64;
    let grid: Vec<f64> = (0..GRID_POINTS).map(|i| LOG_RATIO_MIN + step * i as f64).collect();
    let values: Vec<f64> = grid.iter().map(|&t| f(Some(t))).collect();
    let (best, &best_val) = values
        .iter()
        .enumerate()
        .filter(|(_, v)| v.is_finite())
        .fold((0, &f64::NEG_INFINITY), |acc, (i, v)| if *v > *acc.1 { (i, v) } else { acc });
    let at_zero = f(None);
    if best == GRID_POINTS - 1 && best_val.is_finite() {
        return (grid[best].exp(), best_val, true);
    }
    let lo = grid[best.saturating_sub(1)];
    let hi = grid[(best + 1).min(GRID_POINTS - 1)];
    let (t, val) = brent_maximize(|t| f(Some(t)), lo, hi, 1e-10, 300);
    let (t, val) = if best_val > val { (grid[best], best_val) } else { (t, val) };
    if at_zero.is_finite() && at_zero >= val {
        (0.0, at_zero, false)
    } else {
        (t.exp(), val, false)
    }
}

pub fn fit_random_intercept(data: &GroupedValues, criterion: Criterion) -> Result<RandomInterceptFit> {
    let sums = summaries(data);
    let n = data.n_total() as f64;
    let grand = neumaier_sum(data.groups.iter().flatten().copied()) / n;
    let ssw: f64 = sums.iter().map(|s| s.ssw).sum();
    let sst = neumaier_sum(data.groups.iter().flatten().map(|v| (v - grand) * (v - grand)));
    let scale = sst.max(grand * grand).max(f64::MIN_POSITIVE);

    if sst <= 1e-28 * scale.max(1.0) {
        let blups = vec![0.0; sums.len()];
        return Ok(RandomInterceptFit {
            mean: grand,
            var_between: 0.0,
            var_within: VAR_WITHIN_FLOOR,
            loglik: loglik_from(&sums, grand, 0.0, VAR_WITHIN_FLOOR, criterion),
            blups,
            criterion,
            degenerate: true,
        });
    }

    let singletons = sums.iter().all(|s| s.k == 1.0);
    let no_within = ssw <= 1e-24 * sst;
    let mut floored = singletons || no_within;
    let (mut vb, mut vw) = (0.0, VAR_WITHIN_FLOOR);

    if !floored {
        let (ratio, _, edge) = maximize_nonneg(|t| profiled(&sums, n, t, criterion).0);
        let log_ratio = if ratio > 0.0 { Some(ratio.ln()) } else { None };
        let (_, vw_hat) = profiled(&sums, n, log_ratio, criterion);
        if edge || vw_hat < VAR_WITHIN_FLOOR {
            floored = true;
        } else {
            vw = vw_hat;
            vb = ratio * vw_hat;
        }
    }
    if floored {
        vw = VAR_WITHIN_FLOOR;
        let objective = |t: Option<f64>| {
            let vb = t.map_or(0.0, f64::exp);
            let (mu, _) = gls_mean(&sums, vb, vw);
            loglik_from(&sums, mu, vb, vw, criterion)
        };
        vb = maximize_nonneg(objective).0;
    }

    let (mean, _) = gls_mean(&sums, vb, vw);
    let blups = sums
        .iter()
        .map(|s| vb * s.k * (s.mean - mean) / (vw + s.k * vb))
        .collect();
    Ok(RandomInterceptFit {
        mean,
        var_between: vb,
        var_within: vw,
        loglik: loglik_from(&sums, mean, vb, vw, criterion),
        blups,
        criterion,
        degenerate: no_within,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grouped(v: &[&[f64]]) -> GroupedValues {
        GroupedValues::new(v.iter().map(|g| g.to_vec()).collect()).unwrap()
    }

    /// Balanced one-way ANOVA mean squares.
    fn anova(data: &GroupedValues) -> (f64, f64, f64) {
        let g = data.groups();
        let n_sub = g.len() as f64;
        let k = g[0].len() as f64;
        let means: Vec<f64> = g.iter().map(|x| x.iter().sum::<f64>() / k).collect();
        let grand = means.iter().sum::<f64>() / n_sub;
        let ssw: f64 = g
            .iter()
            .zip(&means)
            .map(|(x, m)| x.iter().map(|v| (v - m).powi(2)).sum::<f64>())
            .sum();
        let ssb: f64 = means.iter().map(|m| k * (m - grand).powi(2)).sum();
        (ssb / (n_sub - 1.0), ssw / (n_sub * (k - 1.0)), k)
    }

    #[test]
    fn reml_matches_balanced_anova() {
        let data = grouped(&[
            &[1.2, 0.7, 1.9],
            &[3.1, 2.2, 2.8],
            &[0.1, -0.4, 0.6],
            &[2.0, 1.1, 1.6],
            &[1.4, 2.6, 2.1],
        ]);
        let (msb, msw, k) = anova(&data);
        let fit = fit_random_intercept(&data, Criterion::Reml).unwrap();
        assert!((fit.var_within - msw).abs() < 1e-6, "{} vs {}", fit.var_within, msw);
        assert!((fit.var_between - ((msb - msw) / k).max(0.0)).abs() < 1e-6);
        assert!(!fit.degenerate);
    }

    #[test]
    fn reml_hits_zero_boundary_when_msb_below_msw() {
        let data = grouped(&[&[0.0, 2.0], &[0.1, 1.9], &[1.0, 1.0], &[2.0, 0.05]]);
        let (msb, msw, _) = anova(&data);
        assert!(msb < msw);
        let fit = fit_random_intercept(&data, Criterion::Reml).unwrap();
        assert_eq!(fit.var_between, 0.0);
        let n = 8.0;
        let mean = data.groups().iter().flatten().sum::<f64>() / n;
        let ss: f64 = data.groups().iter().flatten().map(|v| (v - mean).powi(2)).sum();
        assert!((fit.var_within - ss / (n - 1.0)).abs() < 1e-9);
    }

    #[test]
    fn ml_matches_balanced_closed_form() {
        let data = grouped(&[&[1.0, 1.5], &[3.0, 2.0], &[0.0, 0.8], &[2.5, 3.5], &[-1.0, 0.2]]);
        let g = data.groups();
        let k = 2.0;
        let means: Vec<f64> = g.iter().map(|x| x.iter().sum::<f64>() / k).collect();
        let grand = means.iter().sum::<f64>() / 5.0;
        let ssw: f64 = g.iter().zip(&means).map(|(x, m)| x.iter().map(|v| (v - m).powi(2)).sum::<f64>()).sum();
        let vw = ssw / (5.0 * (k - 1.0));
        let vb = (means.iter().map(|m| (m - grand).powi(2)).sum::<f64>() / 5.0 - vw / k).max(0.0);
        let fit = fit_random_intercept(&data, Criterion::Ml).unwrap();
        assert!((fit.var_within - vw).abs() < 1e-6);
        assert!((fit.var_between - vb).abs() < 1e-6);
        assert!((fit.mean - grand).abs() < 1e-12);
    }

    #[test]
    fn zero_within_spread_floors_var_within() {
        let data = grouped(&[&[1.0, 1.0], &[2.0, 2.0], &[3.0, 3.0]]);
        let reml = fit_random_intercept(&data, Criterion::Reml).unwrap();
        assert!((reml.mean - 2.0).abs() < 1e-12);
        assert_eq!(reml.var_within, VAR_WITHIN_FLOOR);
        // ANOVA value (MSB - MSW)/K with MSW = 0: MSB = 2*2/2 = 2, so 1.
        assert!((reml.var_between - 1.0).abs() < 1e-6);
        let ml = fit_random_intercept(&data, Criterion::Ml).unwrap();
        assert_eq!(ml.var_within, VAR_WITHIN_FLOOR);
        assert!((ml.var_between - 2.0 / 3.0).abs() < 1e-6);
        assert!(reml.degenerate && ml.degenerate);
    }

    #[test]
    fn identical_values_are_degenerate() {
        let data = grouped(&[&[4.0, 4.0], &[4.0], &[4.0, 4.0, 4.0]]);
        let fit = fit_random_intercept(&data, Criterion::Reml).unwrap();
        assert!(fit.degenerate);
        assert_eq!(fit.mean, 4.0);
        assert_eq!(fit.var_within, VAR_WITHIN_FLOOR);
        assert_eq!(fit.var_between, 0.0);
    }

    #[test]
    fn singleton_groups_floor_within_variance() {
        let data = grouped(&[&[1.0], &[2.0], &[4.0], &[5.0]]);
        let fit = fit_random_intercept(&data, Criterion::Ml).unwrap();
        assert_eq!(fit.var_within, VAR_WITHIN_FLOOR);
        assert!((fit.mean - 3.0).abs() < 1e-12);
        assert!((fit.var_between - 2.5).abs() < 1e-6);
    }

    #[test]
    fn zero_between_variance_reduces_to_iid_normal() {
        let data = grouped(&[&[0.3, -1.2], &[2.2], &[0.5, 0.9, -0.1]]);
        let (mu, v) = (0.4, 1.7);
        let iid: f64 = data
            .groups()
            .iter()
            .flatten()
            .map(|y| -0.5 * (2.0 * PI * v).ln() - (y - mu).powi(2) / (2.0 * v))
            .sum();
        assert!((loglik_at(&data, mu, 0.0, v, Criterion::Ml) - iid).abs() < 1e-12);
    }

    #[test]
    fn loglik_matches_numerical_marginalization() {
        // N = 2, K = 2: integrate the random intercept out by Simpson's rule.
        let data = grouped(&[&[0.4, 1.3], &[-0.7, 0.1]]);
        let (mu, vb, vw) = (0.2_f64, 0.8_f64, 0.5_f64);
        let norm = |x: f64, m: f64, v: f64| (-(x - m).powi(2) / (2.0 * v)).exp() / (2.0 * PI * v).sqrt();
        let mut total = 0.0;
        for g in data.groups() {
            let sd = vb.sqrt();
            let (a, b, steps) = (-12.0 * sd, 12.0 * sd, 20_000);
            let h = (b - a) / steps as f64;
            let integrand = |u: f64| norm(u, 0.0, vb) * g.iter().map(|y| norm(*y, mu + u, vw)).product::<f64>();
            let mut s = integrand(a) + integrand(b);
            for i in 1..steps {
                let x = a + h * i as f64;
                s += integrand(x) * if i % 2 == 1 { 4.0 } else { 2.0 };
            }
            total += (s * h / 3.0).ln();
        }
        assert!((loglik_at(&data, mu, vb, vw, Criterion::Ml) - total).abs() < 1e-8);
    }

    #[test]
    fn blups_balance_and_shrink() {
        let data = grouped(&[&[1.0, 2.0, 1.5], &[3.0, 2.5], &[0.0, 0.4, 0.2, 0.3], &[1.1]]);
        for criterion in [Criterion::Ml, Criterion::Reml] {
            let fit = fit_random_intercept(&data, criterion).unwrap();
            let weighted: f64 = data
                .groups()
                .iter()
                .zip(&fit.blups)
                .map(|(g, u)| g.iter().map(|y| y - fit.mean - u).sum::<f64>() / fit.var_within)
                .sum();
            assert!(weighted.abs() < 1e-8, "{weighted}");
            for (g, u) in data.groups().iter().zip(&fit.blups) {
                let centered = g.iter().sum::<f64>() / g.len() as f64 - fit.mean;
                assert!(u.abs() <= centered.abs() + 1e-15);
            }
        }
    }

    #[test]
    fn rejects_single_subject() {
        assert!(GroupedValues::new(vec![vec![1.0, 2.0]]).is_err());
    }
}
