#![allow(dead_code)]

use argmin::core::{CostFunction, Error, Executor};
use argmin::solver::neldermead::NelderMead;
use cma_core::TrialSeries;
use nalgebra::{DMatrix, DVector};

pub fn centered(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

/// Bivariate Gaussian log-likelihood `-n log det S - sum e' S^-1 e` of the
/// mediator and outcome equations on mean-centered data.
pub fn eq8_loglik(s: &TrialSeries, a: f64, c: f64, b: f64, s1: f64, s2: f64, delta: f64) -> f64 {
    let (z, m, r) = (centered(&s.z), centered(&s.m), centered(&s.r));
    let cov = nalgebra::Matrix2::new(s1 * s1, delta * s1 * s2, delta * s1 * s2, s2 * s2);
    let inv = match cov.try_inverse() {
        Some(i) => i,
        None => return f64::NEG_INFINITY,
    };
    let mut quad = 0.0;
    for t in 0..z.len() {
        let e = nalgebra::Vector2::new(m[t] - a * z[t], r[t] - c * z[t] - b * m[t]);
        quad += (e.transpose() * inv * e)[0];
    }
    -(z.len() as f64) * cov.determinant().ln() - quad
}

/// Least-squares coefficients of `y` on the given columns.
pub fn ols(y: &[f64], cols: &[&[f64]]) -> Vec<f64> {
    let n = y.len();
    let x = DMatrix::from_fn(n, cols.len(), |i, j| cols[j][i]);
    let sol = x
        .svd(true, true)
        .solve(&DVector::from_column_slice(y), 1e-14)
        .expect("svd solve");
    sol.iter().copied().collect()
}

struct Negated<F>(F);

impl<F: Fn(&[f64]) -> f64> CostFunction for Negated<F> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, p: &Self::Param) -> Result<Self::Output, Error> {
        let v = (self.0)(p);
        Ok(if v.is_finite() { -v } else { f64::INFINITY })
    }
}

/// Nelder-Mead maximization with restarts from the incumbent on shrinking
/// simplices.
pub fn maximize<F: Fn(&[f64]) -> f64>(f: F, x0: &[f64], step: f64) -> (Vec<f64>, f64) {
    let cost = Negated(f);
    let mut x = x0.to_vec();
    let mut scale = step;
    for _ in 0..6 {
        let mut simplex = vec![x.clone()];
        for i in 0..x.len() {
            let mut v = x.clone();
            v[i] += scale;
            simplex.push(v);
        }
        let solver = NelderMead::new(simplex)
            .with_sd_tolerance(1e-15)
            .expect("tolerance");
        let res = Executor::new(Negated(&cost.0), solver)
            .configure(|s| s.max_iters(20_000))
            .run()
            .expect("nelder-mead");
        x = res.state.best_param.expect("best parameter");
        scale *= 0.1;
    }
    let v = (cost.0)(&x);
    (x, v)
}
