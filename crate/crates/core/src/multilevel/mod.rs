//! Estimating the error correlation from repeated sessions.
//!
//! Every session `(i, k)` carries its own path coefficients
//! `b_ik = (A_ik, B_ik, C_ik)`, drawn as `b_ik = b + u_i + eta_ik` with
//! `u_i ~ N(0, Psi)` and `eta_ik ~ N(0, Lambda)` (both diagonal). The
//! correlation `delta` is shared by all sessions. Four procedures are
//! provided:
//!
//! | method | `delta` | fixed effects |
//! |--------|---------|---------------|
//! | [`cma_ml`]   | maximizes the summed ML random-intercept likelihood of the sessionwise estimates | ML random-intercept fits |
//! | [`cma_h`]    | maximizes the profile h-likelihood | h-likelihood coordinate ascent |
//! | [`cma_ts`]   | supplied | REML random-intercept fits |
//! | [`cma_h_ts`] | from [`cma_h`] | REML random-intercept fits |
//!
//! [`kkb`] is [`cma_ts`] at `delta = 0`. The total effect `C'` is always the
//! REML random-intercept mean of the sessionwise `C'_ik`.

mod hlik;
mod optimize;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    center, check_delta, CrossProducts, MultilevelDataset, NoiseCov, PathCoefficients,
    ResidualCov, SessionKey,
};
use crate::error::{CmaError, Result};
use crate::lmm::{fit_random_intercept, Criterion, GroupedValues, RandomInterceptFit};
use crate::single_level::{estimate_sigmas, residual_cov_from, theta_from};

pub use hlik::{
    cma_h_inner, cma_h_inner_with, h_likelihood, HOptions, HState, LambdaStructure, H_MAX_ITER, H_REL_TOL,
    H_VARIANCE_FLOOR,
};
pub use optimize::{
    delta_grid, optimize_delta, DeltaOptimum, DELTA_GRID_EDGE, DELTA_GRID_POINTS,
    DELTA_SEARCH_EDGE, DELTA_XTOL,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ml,
    H,
    Ts,
    HTs,
    Kkb,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Ml, Method::H, Method::Ts, Method::HTs, Method::Kkb];

    /// Display name used in tables.
    pub fn label(self) -> &'static str {
        match self {
            Method::Ml => "CMA-ml",
            Method::H => "CMA-h",
            Method::Ts => "CMA-ts",
            Method::HTs => "CMA-h-ts",
            Method::Kkb => "KKB",
        }
    }

    /// True when the method estimates `delta` itself.
    pub fn estimates_delta(self) -> bool {
        matches!(self, Method::Ml | Method::H | Method::HTs)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Ml => "ml",
            Method::H => "h",
            Method::Ts => "ts",
            Method::HTs => "h-ts",
            Method::Kkb => "kkb",
        };
        f.write_str(s)
    }
}

impl FromStr for Method {
    type Err = CmaError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ml" | "cma-ml" => Ok(Method::Ml),
            "h" | "cma-h" => Ok(Method::H),
            "ts" | "cma-ts" => Ok(Method::Ts),
            "h-ts" | "h_ts" | "hts" | "cma-h-ts" => Ok(Method::HTs),
            "kkb" => Ok(Method::Kkb),
            other => Err(CmaError::InvalidArgument(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEstimate {
    pub key: SessionKey,
    pub coef: PathCoefficients,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
}

/// Single-level fits of every session at a shared `delta`, in key order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionwiseFits {
    pub delta: f64,
    pub sessions: Vec<SessionEstimate>,
}

impl SessionwiseFits {
    pub fn get(&self, key: &SessionKey) -> Option<&SessionEstimate> {
        self.sessions
            .binary_search_by(|e| e.key.cmp(key))
            .ok()
            .map(|i| &self.sessions[i])
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    /// One coordinate of the session coefficients grouped by subject.
    pub fn grouped<F: Fn(&PathCoefficients) -> f64>(&self, f: F) -> Result<GroupedValues> {
        let mut groups: Vec<Vec<f64>> = Vec::new();
        for e in &self.sessions {
            let i = e.key.subject as usize - 1;
            if groups.len() <= i {
                groups.resize(i + 1, Vec::new());
            }
            groups[i].push(f(&e.coef));
        }
        GroupedValues::new(groups)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixedEffectsFit {
    pub method: Method,
    pub delta_hat: f64,
    /// Fixed effects `(A, B, C)`. `A` is always the REML mean of the
    /// sessionwise `A` estimates, which do not depend on `delta`.
    pub fixed: [f64; 3],
    /// Standard errors of `fixed` from the fitted variance components.
    pub fixed_se: [f64; 3],
    pub c_total: f64,
    pub c_total_se: f64,
    /// Between-subject variances `(sigma_alpha^2, sigma_beta^2, sigma_gamma^2)`.
    pub psi: [f64; 3],
    /// Within-subject session variances `(lambda_alpha^2, lambda_beta^2, lambda_gamma^2)`.
    pub lambda: [f64; 3],
    pub indirect_prod: f64,
    pub indirect_diff: f64,
    pub per_session: SessionwiseFits,
    pub objective_value: f64,
    pub converged: bool,
    pub iterations: usize,
    /// The `delta` objective was constant over the search grid.
    pub flat_objective: bool,
}

impl MixedEffectsFit {
    pub fn a(&self) -> f64 {
        self.fixed[0]
    }

    pub fn b(&self) -> f64 {
        self.fixed[1]
    }

    pub fn c(&self) -> f64 {
        self.fixed[2]
    }

    /// Mean of the three `lambda` entries, comparable to a common `lambda^2`.
    pub fn lambda_pooled(&self) -> f64 {
        (self.lambda[0] + self.lambda[1] + self.lambda[2]) / 3.0
    }
}

/// Per-session sufficient statistics, computed once per dataset.
pub(crate) struct Prepared {
    pub(crate) keys: Vec<SessionKey>,
    pub(crate) cps: Vec<CrossProducts>,
    pub(crate) rcs: Vec<ResidualCov>,
    pub(crate) counts: Vec<usize>,
    pub(crate) n_subjects: usize,
}

impl Prepared {
    pub(crate) fn new(data: &MultilevelDataset) -> Result<Self> {
        let keys: Vec<SessionKey> = data.sessions().keys().copied().collect();
        let cps: Vec<CrossProducts> = data
            .sessions()
            .values()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|s| center(s).cross_products())
            .collect();
        let rcs = keys
            .iter()
            .zip(&cps)
            .map(|(k, cp)| residual_cov_from(cp).map_err(|e| e.in_session(*k)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            keys,
            cps,
            rcs,
            counts: data.sessions_per_subject().to_vec(),
            n_subjects: data.n_subjects(),
        })
    }

    fn require_subjects(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(CmaError::InvalidDataset(format!(
                "at least 2 subjects required, found {}",
                self.n_subjects
            )));
        }
        Ok(())
    }
}

fn sessionwise(prep: &Prepared, delta: f64) -> Result<SessionwiseFits> {
    let results: Vec<Result<SessionEstimate>> = (0..prep.keys.len())
        .into_par_iter()
        .map(|s| {
            let key = prep.keys[s];
            let inner = || -> Result<SessionEstimate> {
                let (v1, v2) = estimate_sigmas(&prep.rcs[s], delta)?;
                let noise = NoiseCov::from_variances(v1, v2, delta)?;
                let coef = theta_from(&prep.cps[s], &noise)?;
                Ok(SessionEstimate {
                    key,
                    coef,
                    sigma1_sq: v1,
                    sigma2_sq: v2,
                })
            };
            inner().map_err(|e| e.in_session(key))
        })
        .collect();
    let sessions = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SessionwiseFits { delta, sessions })
}

/// Single-level fits of every session at the shared `delta`.
pub fn fit_sessionwise(data: &MultilevelDataset, delta: f64) -> Result<SessionwiseFits> {
    check_delta(delta)?;
    sessionwise(&Prepared::new(data)?, delta)
}

fn coordinate(j: usize) -> fn(&PathCoefficients) -> f64 {
    match j {
        0 => |c| c.a,
        1 => |c| c.b,
        _ => |c| c.c,
    }
}

fn coordinate_fits(
    sw: &SessionwiseFits,
    criterion: Criterion,
) -> Result<Vec<(GroupedValues, RandomInterceptFit)>> {
    (0..3)
        .map(|j| {
            let g = sw.grouped(coordinate(j))?;
            let fit = fit_random_intercept(&g, criterion)?;
            Ok((g, fit))
        })
        .collect()
}

/// REML mean and SE of the `delta`-free coefficient `A`.
fn a_effect(sw: &SessionwiseFits) -> Result<(f64, f64)> {
    let g = sw.grouped(|c| c.a)?;
    let fit = fit_random_intercept(&g, Criterion::Reml)?;
    Ok((fit.mean, fit.mean_se(&g)))
}

fn total_effect(sw: &SessionwiseFits) -> Result<(f64, f64)> {
    let g = sw.grouped(|c| c.c_total)?;
    let fit = fit_random_intercept(&g, Criterion::Reml)?;
    Ok((fit.mean, fit.mean_se(&g)))
}

/// Random-intercept fits of the sessionwise coefficients at `delta`.
fn two_step(
    prep: &Prepared,
    delta: f64,
    method: Method,
    criterion: Criterion,
) -> Result<MixedEffectsFit> {
    let sw = sessionwise(prep, delta)?;
    let fits = coordinate_fits(&sw, criterion)?;
    let (c_total, c_total_se) = total_effect(&sw)?;
    let (a, a_se) = a_effect(&sw)?;
    let fixed = [a, fits[1].1.mean, fits[2].1.mean];
    let mut fixed_se = [0, 1, 2].map(|j| fits[j].1.mean_se(&fits[j].0));
    fixed_se[0] = a_se;
    Ok(MixedEffectsFit {
        method,
        delta_hat: delta,
        fixed,
        fixed_se,
        c_total,
        c_total_se,
        psi: [0, 1, 2].map(|j| fits[j].1.var_between),
        lambda: [0, 1, 2].map(|j| fits[j].1.var_within),
        indirect_prod: fixed[0] * fixed[1],
        indirect_diff: c_total - fixed[2],
        per_session: sw,
        objective_value: fits.iter().map(|(_, f)| f.loglik).sum(),
        converged: true,
        iterations: 0,
        flat_objective: false,
    })
}

fn ml_objective(prep: &Prepared, delta: f64) -> f64 {
    let value = || -> Result<f64> {
        let sw = sessionwise(prep, delta)?;
        Ok(coordinate_fits(&sw, Criterion::Ml)?
            .iter()
            .map(|(_, f)| f.loglik)
            .sum())
    };
    value().unwrap_or(f64::NAN)
}

/// Maximizes the summed ML random-intercept log-likelihood of the
/// sessionwise `(A, B, C)` over `delta`.
pub fn cma_ml(data: &MultilevelDataset) -> Result<MixedEffectsFit> {
    let prep = Prepared::new(data)?;
    prep.require_subjects()?;
    sessionwise(&prep, 0.0)?;
    let opt = optimize_delta(|d| ml_objective(&prep, d))?;
    let mut fit = two_step(&prep, opt.delta, Method::Ml, Criterion::Ml)?;
    fit.objective_value = opt.value;
    fit.iterations = opt.grid.len();
    fit.flat_objective = opt.flat;
    Ok(fit)
}

/// Two-step REML fit at a supplied `delta`.
pub fn cma_ts(data: &MultilevelDataset, delta: f64) -> Result<MixedEffectsFit> {
    check_delta(delta)?;
    let prep = Prepared::new(data)?;
    prep.require_subjects()?;
    two_step(&prep, delta, Method::Ts, Criterion::Reml)
}

/// [`cma_ts`] with uncorrelated errors.
pub fn kkb(data: &MultilevelDataset) -> Result<MixedEffectsFit> {
    let prep = Prepared::new(data)?;
    prep.require_subjects()?;
    two_step(&prep, 0.0, Method::Kkb, Criterion::Reml)
}

fn h_fit(prep: &Prepared, opts: &HOptions) -> Result<(MixedEffectsFit, HState)> {
    prep.require_subjects()?;
    sessionwise(prep, 0.0)?;
    // States with variance components pinned at the floor are degenerate
    // (h grows without bound as a variance shrinks to zero). They take part
    // in the search only if no grid point does better.
    let grid: Vec<(f64, Option<(usize, f64)>)> = delta_grid()
        .par_iter()
        .map(|&d| {
            let s = hlik::h_inner(prep, d, opts).ok();
            (d, s.map(|s| (s.floored_components(opts.floor), s.h_value)))
        })
        .collect();
    let allowed = grid
        .iter()
        .filter_map(|(_, s)| s.map(|(f, _)| f))
        .min()
        .unwrap_or(usize::MAX);
    let admissible = |s: Option<(usize, f64)>| match s {
        Some((f, h)) if f <= allowed => h,
        _ => f64::NAN,
    };
    let opt = optimize_delta(|d| {
        match grid.iter().find(|(g, _)| g.to_bits() == d.to_bits()) {
            Some(&(_, s)) => admissible(s),
            None => admissible(
                hlik::h_inner(prep, d, opts)
                    .ok()
                    .map(|s| (s.floored_components(opts.floor), s.h_value)),
            ),
        }
    })?;
    let state = hlik::h_inner(prep, opt.delta, opts)?;
    let sw = sessionwise(prep, opt.delta)?;
    let (c_total, c_total_se) = total_effect(&sw)?;
    // A does not involve delta; it is reported from its REML fit so that it
    // agrees across methods, as C' does.
    let (a, a_se) = a_effect(&sw)?;
    let fixed = [a, state.b[1], state.b[2]];
    let mut fixed_se = [0, 1, 2].map(|j| {
        let info: f64 = prep
            .counts
            .iter()
            .map(|&k| k as f64 / (state.lambda[j] + k as f64 * state.psi[j]))
            .sum();
        (1.0 / info).sqrt()
    });
    fixed_se[0] = a_se;
    let fit = MixedEffectsFit {
        method: Method::H,
        delta_hat: opt.delta,
        fixed,
        fixed_se,
        c_total,
        c_total_se,
        psi: state.psi,
        lambda: state.lambda,
        indirect_prod: fixed[0] * fixed[1],
        indirect_diff: c_total - fixed[2],
        per_session: sw,
        objective_value: state.h_value,
        converged: state.converged,
        iterations: state.iterations,
        flat_objective: opt.flat,
    };
    Ok((fit, state))
}

/// Maximizes the profile h-likelihood over `delta`.
pub fn cma_h(data: &MultilevelDataset) -> Result<MixedEffectsFit> {
    cma_h_with(data, &HOptions::default()).map(|(fit, _)| fit)
}

/// [`cma_h`] with explicit coordinate-ascent options, together with the
/// final state at the optimum.
pub fn cma_h_with(data: &MultilevelDataset, opts: &HOptions) -> Result<(MixedEffectsFit, HState)> {
    let prep = Prepared::new(data)?;
    h_fit(&prep, opts)
}

/// `delta` from [`cma_h`], everything else from [`cma_ts`] at that `delta`.
pub fn cma_h_ts(data: &MultilevelDataset) -> Result<MixedEffectsFit> {
    let prep = Prepared::new(data)?;
    let (h, _) = h_fit(&prep, &HOptions::default())?;
    hybrid_from(&prep, &h)
}

fn hybrid_from(prep: &Prepared, h: &MixedEffectsFit) -> Result<MixedEffectsFit> {
    let mut fit = two_step(prep, h.delta_hat, Method::HTs, Criterion::Reml)?;
    fit.objective_value = h.objective_value;
    fit.converged = h.converged;
    fit.iterations = h.iterations;
    fit.flat_objective = h.flat_objective;
    Ok(fit)
}

/// Fits with `method`. `delta` is required for [`Method::Ts`] and ignored
/// otherwise.
pub fn fit_method(
    data: &MultilevelDataset,
    method: Method,
    delta: Option<f64>,
) -> Result<MixedEffectsFit> {
    match method {
        Method::Ml => cma_ml(data),
        Method::H => cma_h(data),
        Method::HTs => cma_h_ts(data),
        Method::Kkb => kkb(data),
        Method::Ts => match delta {
            Some(d) => cma_ts(data, d),
            None => Err(CmaError::InvalidArgument("method ts requires delta".into())),
        },
    }
}

/// Fits several methods on one dataset, sharing the h-likelihood search
/// between [`Method::H`] and [`Method::HTs`].
pub fn fit_methods(
    data: &MultilevelDataset,
    methods: &[Method],
    delta: Option<f64>,
) -> Vec<(Method, Result<MixedEffectsFit>)> {
    let prep = match Prepared::new(data) {
        Ok(p) => p,
        Err(e) => return methods.iter().map(|&m| (m, Err(e.clone()))).collect(),
    };
    let needs_h = methods.iter().any(|m| matches!(m, Method::H | Method::HTs));
    let h = if needs_h {
        Some(h_fit(&prep, &HOptions::default()).map(|(f, _)| f))
    } else {
        None
    };
    methods
        .iter()
        .map(|&m| {
            let fit = match m {
                Method::H => h.clone().expect("computed above"),
                Method::HTs => match h.as_ref().expect("computed above") {
                    Ok(hf) => hybrid_from(&prep, hf),
                    Err(e) => Err(e.clone()),
                },
                other => fit_method(data, other, delta),
            };
            (m, fit)
        })
        .collect()
}
