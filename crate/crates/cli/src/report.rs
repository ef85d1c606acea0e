//! JSON reports for the fit commands.

use cma_core::inference::{asymptotic_ci, asymptotic_moments, bc_interval, BootstrapRun, BOOTSTRAP_TARGETS};
use cma_core::multilevel::MixedEffectsFit;
use cma_core::numeric::norm_quantile;
use cma_core::simulate::Quantity;
use cma_core::single_level::SingleLevelFit;
use serde::Serialize;

use crate::error::Result;
use crate::manifest::VERSION;

#[derive(Debug, Serialize)]
pub struct Interval {
    pub quantity: &'static str,
    pub estimate: f64,
    pub se: Option<f64>,
    pub lower: f64,
    pub upper: f64,
    pub method: &'static str,
}

#[derive(Debug, Serialize)]
pub struct Coefficients {
    pub a: f64,
    pub c: f64,
    pub b: f64,
    pub c_total: f64,
    pub ab_product: f64,
    pub ab_difference: f64,
}

#[derive(Debug, Serialize)]
pub struct SingleReport {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub n: usize,
    pub delta: f64,
    pub level: f64,
    pub coefficients: Coefficients,
    pub sigma1_sq: f64,
    pub sigma2_sq: f64,
    pub q_hat: f64,
    pub loglik: f64,
    pub intervals: Vec<Interval>,
}

const SINGLE_INTERVALS: [Quantity; 6] = [
    Quantity::A,
    Quantity::C,
    Quantity::B,
    Quantity::CTotal,
    Quantity::AbProd,
    Quantity::AbDiff,
];

pub fn single_report(fit: &SingleLevelFit, level: f64, seed: u64) -> Result<SingleReport> {
    let mut intervals = Vec::new();
    for q in SINGLE_INTERVALS {
        let ci = asymptotic_ci(fit, q, level)?;
        let (_, var) = asymptotic_moments(fit, q)?;
        intervals.push(Interval {
            quantity: q.name(),
            estimate: ci.point,
            se: Some(var.max(0.0).sqrt()),
            lower: ci.lower,
            upper: ci.upper,
            method: "asymptotic",
        });
    }
    let t = &fit.theta;
    Ok(SingleReport {
        command: "fit-single",
        version: VERSION,
        seed,
        n: fit.n,
        delta: fit.noise.delta,
        level,
        coefficients: Coefficients {
            a: t.a,
            c: t.c,
            b: t.b,
            c_total: t.c_total,
            ab_product: fit.indirect_prod,
            ab_difference: fit.indirect_diff,
        },
        sigma1_sq: fit.noise.sigma1 * fit.noise.sigma1,
        sigma2_sq: fit.noise.sigma2 * fit.noise.sigma2,
        q_hat: fit.q_hat,
        loglik: fit.loglik,
        intervals,
    })
}

#[derive(Debug, Serialize)]
pub struct VarianceComponents {
    pub sigma2_alpha: f64,
    pub sigma2_gamma: f64,
    pub sigma2_beta: f64,
    pub lambda2_alpha: f64,
    pub lambda2_gamma: f64,
    pub lambda2_beta: f64,
}

#[derive(Debug, Serialize)]
pub struct BootstrapSection {
    pub n_replicates: usize,
    pub n_ok: usize,
    pub seed: u64,
    pub intervals: Vec<Interval>,
}

#[derive(Debug, Serialize)]
pub struct MultiReport {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: u64,
    pub method: String,
    pub n_subjects: usize,
    pub n_sessions: usize,
    pub total_trials: usize,
    /// Estimated `delta`, or the supplied one for methods that take it.
    pub delta: f64,
    pub delta_estimated: bool,
    pub level: f64,
    pub coefficients: Coefficients,
    pub variance_components: VarianceComponents,
    pub intervals: Vec<Interval>,
    pub objective_value: f64,
    pub converged: bool,
    pub iterations: usize,
    pub flat_objective: bool,
    pub bootstrap: Option<BootstrapSection>,
}

fn normal_interval(q: Quantity, estimate: f64, se: f64, z: f64) -> Interval {
    Interval {
        quantity: q.name(),
        estimate,
        se: Some(se),
        lower: estimate - z * se,
        upper: estimate + z * se,
        method: "mixed_model",
    }
}

/// Fixed effects use their mixed-model standard errors. `AB_p` uses the
/// first-order delta method and `AB_d` adds the variances of `C'` and `C`,
/// both treating the component estimates as independent.
pub fn mixed_intervals(fit: &MixedEffectsFit, level: f64) -> Vec<Interval> {
    let z = norm_quantile(0.5 + level / 2.0);
    let (a, b, c) = (fit.a(), fit.b(), fit.c());
    let [se_a, se_b, se_c] = fit.fixed_se;
    let se_prod = (b * b * se_a * se_a + a * a * se_b * se_b).sqrt();
    let se_diff = (fit.c_total_se * fit.c_total_se + se_c * se_c).sqrt();
    vec![
        normal_interval(Quantity::A, a, se_a, z),
        normal_interval(Quantity::C, c, se_c, z),
        normal_interval(Quantity::B, b, se_b, z),
        normal_interval(Quantity::CTotal, fit.c_total, fit.c_total_se, z),
        normal_interval(Quantity::AbProd, fit.indirect_prod, se_prod, z),
        normal_interval(Quantity::AbDiff, fit.indirect_diff, se_diff, z),
    ]
}

pub fn bootstrap_section(run: &BootstrapRun, level: f64) -> Result<BootstrapSection> {
    let mut intervals = Vec::new();
    for q in BOOTSTRAP_TARGETS {
        if !run.point.contains_key(&q) {
            continue;
        }
        let ci = bc_interval(run, q, level)?;
        intervals.push(Interval {
            quantity: q.name(),
            estimate: ci.point,
            se: run.summary(q).map(|s| s.sd),
            lower: ci.lower,
            upper: ci.upper,
            method: "wild_bootstrap_bc",
        });
    }
    Ok(BootstrapSection {
        n_replicates: run.n_replicates,
        n_ok: run.n_ok(),
        seed: run.seed,
        intervals,
    })
}

pub struct MultiContext {
    pub seed: u64,
    pub n_subjects: usize,
    pub n_sessions: usize,
    pub total_trials: usize,
    pub level: f64,
}

pub fn multi_report(fit: &MixedEffectsFit, ctx: &MultiContext, bootstrap: Option<BootstrapSection>) -> MultiReport {
    MultiReport {
        command: "fit-multi",
        version: VERSION,
        seed: ctx.seed,
        method: fit.method.to_string(),
        n_subjects: ctx.n_subjects,
        n_sessions: ctx.n_sessions,
        total_trials: ctx.total_trials,
        delta: fit.delta_hat,
        delta_estimated: fit.method.estimates_delta(),
        level: ctx.level,
        coefficients: Coefficients {
            a: fit.a(),
            c: fit.c(),
            b: fit.b(),
            c_total: fit.c_total,
            ab_product: fit.indirect_prod,
            ab_difference: fit.indirect_diff,
        },
        // `psi` and `lambda` are stored in (A, B, C) order.
        variance_components: VarianceComponents {
            sigma2_alpha: fit.psi[0],
            sigma2_gamma: fit.psi[2],
            sigma2_beta: fit.psi[1],
            lambda2_alpha: fit.lambda[0],
            lambda2_gamma: fit.lambda[2],
            lambda2_beta: fit.lambda[1],
        },
        intervals: mixed_intervals(fit, ctx.level),
        objective_value: fit.objective_value,
        converged: fit.converged,
        iterations: fit.iterations,
        flat_objective: fit.flat_objective,
        bootstrap,
    }
}
