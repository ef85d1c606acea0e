//! Hierarchical likelihood of the session-coefficient model and its
//! maximization by block coordinate ascent at a fixed `delta`.
//!
//! Coefficient vectors are ordered `(A, B, C)` throughout.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use super::Prepared;
use crate::data::{center, check_delta, CrossProducts, MultilevelDataset, NoiseCov, SessionKey};
use crate::error::Result;
use crate::numeric::CompensatedSum;
use crate::single_level::{estimate_sigmas, theta_from};

pub const H_MAX_ITER: usize = 500;
pub const H_REL_TOL: f64 = 1e-8;
pub const H_VARIANCE_FLOOR: f64 = 1e-10;
/// Largest per-block gradient norm accepted at convergence.
pub const H_GRAD_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub grad_tol: f64,
    pub floor: f64,
    /// Hold `(lambda, psi)` at these values instead of updating them.
    pub fixed_variances: Option<([f64; 3], [f64; 3])>,
    pub lambda_structure: LambdaStructure,
}

/// Parameterization of the session-level covariance `Lambda`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaStructure {
    /// One variance shared by the three coordinates.
    #[default]
    Common,
    /// A separate variance per coordinate.
    Diagonal,
}

impl Default for HOptions {
    fn default() -> Self {
        Self {
            max_iter: H_MAX_ITER,
            rel_tol: H_REL_TOL,
            grad_tol: H_GRAD_TOL,
            floor: H_VARIANCE_FLOOR,
            fixed_variances: None,
            lambda_structure: LambdaStructure::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HState {
    pub delta: f64,
    pub b: [f64; 3],
    /// Subject random effects, by zero-based subject index.
    pub u: Vec<[f64; 3]>,
    /// Session keys in dataset order; `b_ik`, `sigma1_sq` and `sigma2_sq`
    /// are aligned with them.
    pub keys: Vec<SessionKey>,
    pub b_ik: Vec<[f64; 3]>,
    pub lambda: [f64; 3],
    pub lambda_structure: LambdaStructure,
    pub psi: [f64; 3],
    pub sigma1_sq: Vec<f64>,
    pub sigma2_sq: Vec<f64>,
    pub h_value: f64,
    pub h1: f64,
    pub h2: f64,
    pub h3: f64,
    pub converged: bool,
    pub iterations: usize,
    /// `h` after initialization and after every sweep.
    pub trace: Vec<f64>,
}

impl HState {
    pub fn session_coefficients(&self, key: &SessionKey) -> Option<[f64; 3]> {
        self.keys
            .binary_search(key)
            .ok()
            .map(|i| self.b_ik[i])
    }

    /// Number of free variance parameters sitting at `floor`. A common
    /// `lambda` counts once.
    pub fn floored_components(&self, floor: f64) -> usize {
        let lambda = match self.lambda_structure {
            LambdaStructure::Common => &self.lambda[..1],
            LambdaStructure::Diagonal => &self.lambda[..],
        };
        lambda
            .iter()
            .chain(self.psi.iter())
            .filter(|&&v| v <= floor * (1.0 + 1e-9))
            .count()
    }

    fn subject_of(&self, s: usize) -> usize {
        self.keys[s].subject as usize - 1
    }
}

/// Quadratic form of one session's data term in `theta = (A, B, C)`:
/// `sum_t e_t' P e_t = ypy - 2 theta'g + theta'H theta`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct SessionTerms {
    n: f64,
    log_det: f64,
    ypy: f64,
    g: Vector3<f64>,
    h: Matrix3<f64>,
}

impl SessionTerms {
    pub(crate) fn new(cp: &CrossProducts, s1sq: f64, s2sq: f64, delta: f64) -> Self {
        let det = s1sq * s2sq * (1.0 - delta * delta);
        let p11 = s2sq / det;
        let p22 = s1sq / det;
        let p12 = -delta * (s1sq * s2sq).sqrt() / det;
        let h = Matrix3::new(
            p11 * cp.zz,
            p12 * cp.zm,
            p12 * cp.zz,
            p12 * cp.zm,
            p22 * cp.mm,
            p22 * cp.zm,
            p12 * cp.zz,
            p22 * cp.zm,
            p22 * cp.zz,
        );
        let g = Vector3::new(
            p11 * cp.zm + p12 * cp.zr,
            p12 * cp.mm + p22 * cp.mr,
            p12 * cp.zm + p22 * cp.zr,
        );
        let ypy = p11 * cp.mm + 2.0 * p12 * cp.mr + p22 * cp.rr;
        Self {
            n: cp.n as f64,
            log_det: det.ln(),
            ypy,
            g,
            h,
        }
    }

    fn loglik(&self, theta: &Vector3<f64>) -> f64 {
        let quad = self.ypy - 2.0 * theta.dot(&self.g) + theta.dot(&(self.h * theta));
        -self.n * (2.0 * PI).ln() - 0.5 * self.n * self.log_det - 0.5 * quad
    }
}

fn diag_normal_logpdf(x: [f64; 3], mean: [f64; 3], var: [f64; 3]) -> f64 {
    let mut acc = -1.5 * (2.0 * PI).ln();
    for j in 0..3 {
        let d = x[j] - mean[j];
        acc -= 0.5 * var[j].ln() + 0.5 * d * d / var[j];
    }
    acc
}

fn add3(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

fn parts(terms: &[SessionTerms], state: &HState) -> (f64, f64, f64) {
    let mut h1 = CompensatedSum::new();
    let mut h2 = CompensatedSum::new();
    let mut h3 = CompensatedSum::new();
    for (s, t) in terms.iter().enumerate() {
        h1.add(t.loglik(&Vector3::from(state.b_ik[s])));
        let mean = add3(state.b, state.u[state.subject_of(s)]);
        h2.add(diag_normal_logpdf(state.b_ik[s], mean, state.lambda));
    }
    for u in &state.u {
        h3.add(diag_normal_logpdf(*u, [0.0; 3], state.psi));
    }
    (h1.value(), h2.value(), h3.value())
}

/// Evaluates `(h, h1, h2, h3)` for `state` on `data`. The state must have
/// been built for this dataset.
pub fn h_likelihood(data: &MultilevelDataset, state: &HState) -> (f64, f64, f64, f64) {
    let terms: Vec<SessionTerms> = state
        .keys
        .iter()
        .enumerate()
        .map(|(s, key)| {
            let series = data.get(key).expect("state keys must belong to the dataset");
            let cp = center(series).cross_products();
            SessionTerms::new(&cp, state.sigma1_sq[s], state.sigma2_sq[s], state.delta)
        })
        .collect();
    let (h1, h2, h3) = parts(&terms, state);
    (h1 + h2 + h3, h1, h2, h3)
}

/// Profile h-likelihood state at `delta` with the default options.
pub fn cma_h_inner(data: &MultilevelDataset, delta: f64) -> Result<HState> {
    cma_h_inner_with(data, delta, &HOptions::default())
}

pub fn cma_h_inner_with(data: &MultilevelDataset, delta: f64, opts: &HOptions) -> Result<HState> {
    check_delta(delta)?;
    let prep = Prepared::new(data)?;
    h_inner(&prep, delta, opts)
}

pub(crate) fn h_inner(prep: &Prepared, delta: f64, opts: &HOptions) -> Result<HState> {
    check_delta(delta)?;
    let ns = prep.keys.len();
    let nsub = prep.n_subjects;
    let floor = opts.floor;

    let mut sigma1_sq = Vec::with_capacity(ns);
    let mut sigma2_sq = Vec::with_capacity(ns);
    let mut b_ik = Vec::with_capacity(ns);
    for s in 0..ns {
        let key = prep.keys[s];
        let (v1, v2) = estimate_sigmas(&prep.rcs[s], delta).map_err(|e| e.in_session(key))?;
        let noise = NoiseCov::from_variances(v1, v2, delta).map_err(|e| e.in_session(key))?;
        let theta = theta_from(&prep.cps[s], &noise).map_err(|e| e.in_session(key))?;
        sigma1_sq.push(v1.max(floor));
        sigma2_sq.push(v2.max(floor));
        b_ik.push([theta.a, theta.b, theta.c]);
    }
    let terms: Vec<SessionTerms> = (0..ns)
        .map(|s| SessionTerms::new(&prep.cps[s], sigma1_sq[s], sigma2_sq[s], delta))
        .collect();
    let counts: Vec<f64> = prep.counts.iter().map(|&k| k as f64).collect();

    let mut state = HState {
        delta,
        b: [0.0; 3],
        u: vec![[0.0; 3]; nsub],
        keys: prep.keys.clone(),
        b_ik,
        lambda: [1.0; 3],
        lambda_structure: opts.lambda_structure,
        psi: [1.0; 3],
        sigma1_sq,
        sigma2_sq,
        h_value: 0.0,
        h1: 0.0,
        h2: 0.0,
        h3: 0.0,
        converged: false,
        iterations: 0,
        trace: Vec::new(),
    };

    // Moment starting values from the unshrunk session estimates.
    let sums = subject_sums(&state, nsub, |s| state.b_ik[s]);
    for j in 0..3 {
        state.b[j] = mean_over(ns, |s| state.b_ik[s][j]);
        for i in 0..nsub {
            state.u[i][j] = sums[i][j] / counts[i] - state.b[j];
        }
    }
    match opts.fixed_variances {
        Some((lambda, psi)) => {
            state.lambda = lambda.map(|v| v.max(floor));
            state.psi = psi.map(|v| v.max(floor));
        }
        None => {
            update_lambda(&mut state, floor, opts.lambda_structure);
            update_psi(&mut state, floor);
        }
    }

    let (h1, h2, h3) = parts(&terms, &state);
    let mut h_prev = h1 + h2 + h3;
    state.trace.push(h_prev);

    for it in 1..=opts.max_iter {
        // (i) session coefficients
        let inv_l = state.lambda.map(|v| 1.0 / v);
        let prior_prec = Matrix3::from_diagonal(&Vector3::from(inv_l));
        for s in 0..ns {
            let mean = add3(state.b, state.u[state.subject_of(s)]);
            let lhs = terms[s].h + prior_prec;
            let rhs = terms[s].g
                + Vector3::new(mean[0] * inv_l[0], mean[1] * inv_l[1], mean[2] * inv_l[2]);
            let sol = match lhs.cholesky() {
                Some(ch) => ch.solve(&rhs),
                None => lhs.lu().solve(&rhs).unwrap_or_else(|| Vector3::from(mean)),
            };
            state.b_ik[s] = [sol[0], sol[1], sol[2]];
        }
        // (ii) subject effects
        let sums = subject_sums(&state, nsub, |s| state.b_ik[s]);
        for i in 0..nsub {
            for j in 0..3 {
                let dev = sums[i][j] - counts[i] * state.b[j];
                state.u[i][j] =
                    (dev / state.lambda[j]) / (counts[i] / state.lambda[j] + 1.0 / state.psi[j]);
            }
        }
        // (iii) fixed effects
        for j in 0..3 {
            state.b[j] = mean_over(ns, |s| state.b_ik[s][j] - state.u[state.subject_of(s)][j]);
        }
        // (iv), (v) variance components
        if opts.fixed_variances.is_none() {
            update_lambda(&mut state, floor, opts.lambda_structure);
            update_psi(&mut state, floor);
        }

        let (h1, h2, h3) = parts(&terms, &state);
        let h = h1 + h2 + h3;
        state.trace.push(h);
        state.iterations = it;
        if (h - h_prev).abs() < opts.rel_tol * h_prev.abs() {
            let free = opts.fixed_variances.is_none();
            let g = gradient_norms(&terms, &state, opts.lambda_structure, floor);
            let g = if free { g } else { [g[0], g[1], g[2], 0.0, 0.0] };
            if g.iter().all(|&v| v < opts.grad_tol) {
                state.converged = true;
                break;
            }
        }
        h_prev = h;
    }

    let (h1, h2, h3) = parts(&terms, &state);
    state.h1 = h1;
    state.h2 = h2;
    state.h3 = h3;
    state.h_value = h1 + h2 + h3;
    Ok(state)
}

fn mean_over<F: Fn(usize) -> f64>(n: usize, f: F) -> f64 {
    let mut acc = CompensatedSum::new();
    for s in 0..n {
        acc.add(f(s));
    }
    acc.value() / n as f64
}

fn subject_sums<F: Fn(usize) -> [f64; 3]>(state: &HState, nsub: usize, f: F) -> Vec<[f64; 3]> {
    let mut sums = vec![[0.0; 3]; nsub];
    for s in 0..state.keys.len() {
        let v = f(s);
        let i = state.subject_of(s);
        for j in 0..3 {
            sums[i][j] += v[j];
        }
    }
    sums
}

fn update_lambda(state: &mut HState, floor: f64, structure: LambdaStructure) {
    let ns = state.keys.len();
    let per: [f64; 3] = [0, 1, 2].map(|j| {
        mean_over(ns, |s| {
            let r = state.b_ik[s][j] - state.b[j] - state.u[state.subject_of(s)][j];
            r * r
        })
    });
    state.lambda = match structure {
        LambdaStructure::Diagonal => per.map(|v| v.max(floor)),
        LambdaStructure::Common => [((per[0] + per[1] + per[2]) / 3.0).max(floor); 3],
    };
}

fn update_psi(state: &mut HState, floor: f64) {
    let n = state.u.len();
    for j in 0..3 {
        state.psi[j] = mean_over(n, |i| state.u[i][j] * state.u[i][j]).max(floor);
    }
}

/// Norms of the gradient of `h` for the blocks `(b_ik, u, b, Lambda, Psi)`.
/// Variance components sitting at `floor` contribute only an inward pull.
pub(crate) fn gradient_norms(
    terms: &[SessionTerms],
    state: &HState,
    structure: LambdaStructure,
    floor: f64,
) -> [f64; 5] {
    let nsub = state.u.len();
    let mut g_bik = 0.0_f64;
    let mut g_u = vec![[0.0; 3]; nsub];
    let mut g_b = [0.0; 3];
    let mut g_l = [0.0; 3];
    let mut g_p = [0.0; 3];
    for (s, t) in terms.iter().enumerate() {
        let i = state.subject_of(s);
        let th = Vector3::from(state.b_ik[s]);
        let mut grad = t.g - t.h * th;
        for j in 0..3 {
            let r = state.b_ik[s][j] - state.b[j] - state.u[i][j];
            grad[j] -= r / state.lambda[j];
            g_u[i][j] += r / state.lambda[j];
            g_b[j] += r / state.lambda[j];
            g_l[j] += -0.5 / state.lambda[j] + 0.5 * r * r / (state.lambda[j] * state.lambda[j]);
        }
        g_bik += grad.norm_squared();
    }
    for i in 0..nsub {
        for j in 0..3 {
            let u = state.u[i][j];
            g_u[i][j] -= u / state.psi[j];
            g_p[j] += -0.5 / state.psi[j] + 0.5 * u * u / (state.psi[j] * state.psi[j]);
        }
    }
    if structure == LambdaStructure::Common {
        g_l = [g_l[0] + g_l[1] + g_l[2], 0.0, 0.0];
    }
    let at_floor = |v: f64| v <= floor * (1.0 + 1e-9);
    for j in 0..3 {
        if at_floor(state.lambda[j]) {
            g_l[j] = g_l[j].max(0.0);
        }
        if at_floor(state.psi[j]) {
            g_p[j] = g_p[j].max(0.0);
        }
    }
    let norm3 = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [
        g_bik.sqrt(),
        g_u.iter().map(|v| norm3(*v).powi(2)).sum::<f64>().sqrt(),
        norm3(g_b),
        norm3(g_l),
        norm3(g_p),
    ]
}
