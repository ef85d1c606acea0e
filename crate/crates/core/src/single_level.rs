//! Closed-form constrained maximum likelihood for one session given the error
//! correlation `delta`, with plug-in variance estimates and asymptotic
//! covariances.
//!
//! With centered data the model is
//!
//! ```text
//! M = Z A + E1
//! R = Z C + M B + E2,   corr(E1, E2) = delta
//! ```
//!
//! `A` and the total effect `C' = C + A B` come from plain regressions on `Z`
//! and never depend on `delta`. `B` and `C` are the ordinary two-regressor
//! estimates shifted by `delta * sigma2 / sigma1` terms that cancel in
//! `C' - C = A B`.

use serde::{Deserialize, Serialize};

use crate::data::{
    center, check_delta, CenteredSeries, CrossProducts, NoiseCov, PathCoefficients, ResidualCov,
    TrialSeries,
};
use crate::error::{CmaError, Result};
use crate::numeric::neumaier_sum;

/// Relative tolerance on the Gram determinant of `[z m]`.
pub const SINGULAR_DESIGN_TOL: f64 = 1e-12;

fn check_treatment(cp: &CrossProducts) -> Result<()> {
    if cp.zz > 0.0 && cp.zz.is_finite() {
        Ok(())
    } else {
        Err(CmaError::DegenerateTreatment)
    }
}

pub fn fit_a(series: &CenteredSeries) -> Result<f64> {
    a_from(&series.cross_products())
}

pub fn fit_c_total(series: &CenteredSeries) -> Result<f64> {
    c_total_from(&series.cross_products())
}

pub(crate) fn a_from(cp: &CrossProducts) -> Result<f64> {
    check_treatment(cp)?;
    Ok(cp.zm / cp.zz)
}

pub(crate) fn c_total_from(cp: &CrossProducts) -> Result<f64> {
    check_treatment(cp)?;
    Ok(cp.zr / cp.zz)
}

/// Sample covariance of the residuals of `M ~ Z` and `R ~ Z`.
pub fn residual_cov(series: &CenteredSeries) -> Result<ResidualCov> {
    residual_cov_from(&series.cross_products())
}

pub(crate) fn residual_cov_from(cp: &CrossProducts) -> Result<ResidualCov> {
    check_treatment(cp)?;
    let n = cp.n as f64;
    Ok(ResidualCov {
        s11: ((cp.mm - cp.zm * cp.zm / cp.zz) / n).max(0.0),
        s12: (cp.mr - cp.zm * cp.zr / cp.zz) / n,
        s22: ((cp.rr - cp.zr * cp.zr / cp.zz) / n).max(0.0),
    })
}

/// Residual determinant with the rounding tolerance applied.
fn clamped_det(rc: &ResidualCov) -> Result<f64> {
    let det = rc.determinant();
    let tol = 1e-10 * (rc.s11 * rc.s22).max(1.0);
    if det < -tol {
        return Err(CmaError::NegativeVariance { det });
    }
    Ok(det.max(0.0))
}

/// Plug-in `(sigma1^2, sigma2^2)` for a given `delta`.
pub fn estimate_sigmas(rc: &ResidualCov, delta: f64) -> Result<(f64, f64)> {
    check_delta(delta)?;
    if !(rc.s11 > 0.0) {
        return Err(CmaError::SingularResiduals { s11: rc.s11 });
    }
    let det = clamped_det(rc)?;
    Ok((rc.s11, det / (rc.s11 * (1.0 - delta * delta))))
}

/// `B` recovered directly from the residual covariance and `delta`.
pub fn fit_b_plugin(rc: &ResidualCov, delta: f64) -> Result<f64> {
    let (s1sq, _) = estimate_sigmas(rc, delta)?;
    let det = clamped_det(rc)?;
    Ok(rc.s12 / s1sq - delta * det.sqrt() / (s1sq * (1.0 - delta * delta).sqrt()))
}

/// Constrained MLE of `(A, C, B)` for known noise, plus the total effect.
pub fn fit_theta(series: &CenteredSeries, noise: &NoiseCov) -> Result<PathCoefficients> {
    theta_from(&series.cross_products(), noise)
}

pub(crate) fn theta_from(cp: &CrossProducts, noise: &NoiseCov) -> Result<PathCoefficients> {
    check_treatment(cp)?;
    let gram = cp.zz * cp.mm - cp.zm * cp.zm;
    let scale = cp.zz * cp.mm;
    if !(gram > SINGULAR_DESIGN_TOL * scale) {
        return Err(CmaError::SingularDesign {
            rel_det: if scale > 0.0 { gram / scale } else { 0.0 },
        });
    }
    let ratio = noise.delta * noise.sigma2 / noise.sigma1;
    let ols_c = (cp.mm * cp.zr - cp.zm * cp.mr) / gram;
    let ols_b = (cp.zz * cp.mr - cp.zm * cp.zr) / gram;
    Ok(PathCoefficients {
        a: cp.zm / cp.zz,
        b: ols_b - ratio,
        c: ols_c + ratio * cp.zm / cp.zz,
        c_total: cp.zr / cp.zz,
    })
}

/// `-n log det(Sigma) - tr(E Sigma^-1 E')` with `E = Y - X Theta`.
pub fn loglik(series: &CenteredSeries, theta: &PathCoefficients, noise: &NoiseCov) -> f64 {
    let p = noise.precision();
    let quad = neumaier_sum((0..series.n()).map(|t| {
        let e1 = series.m[t] - series.z[t] * theta.a;
        let e2 = series.r[t] - series.z[t] * theta.c - series.m[t] * theta.b;
        p[0][0] * e1 * e1 + 2.0 * p[0][1] * e1 * e2 + p[1][1] * e2 * e2
    }));
    -(series.n() as f64) * noise.determinant().ln() - quad
}

/// Asymptotic covariance of `(A, C, B)` divided by `n`.
pub fn asym_cov_theta(theta: &PathCoefficients, noise: &NoiseCov, q: f64, n: usize) -> [[f64; 3]; 3] {
    let (s1, s2, d) = (noise.sigma1, noise.sigma2, noise.delta);
    let (v1, v2) = (s1 * s1, s2 * s2);
    let a = theta.a;
    let one_m = 1.0 - d * d;
    let cc = v2 * (q * a * a + v1 - q * a * a * d * d) / (q * v1);
    let ac = d * s1 * s2 / q;
    let cb = -a * v2 * one_m / v1;
    let bb = v2 * one_m / v1;
    let nf = n as f64;
    [
        [v1 / q / nf, ac / nf, 0.0],
        [ac / nf, cc / nf, cb / nf],
        [0.0, cb / nf, bb / nf],
    ]
}

/// Asymptotic covariance of `(C', C)` divided by `n`.
pub fn asym_cov_total(theta: &PathCoefficients, noise: &NoiseCov, q: f64, n: usize) -> [[f64; 2]; 2] {
    let (s1, s2, d) = (noise.sigma1, noise.sigma2, noise.delta);
    let (v1, v2) = (s1 * s1, s2 * s2);
    let (a, b) = (theta.a, theta.b);
    let nf = n as f64;
    let tt = (b * b * v1 + 2.0 * b * d * s1 * s2 + v2) / q;
    let tc = (v2 + b * d * s1 * s2) / q;
    let cc = v2 * (q * a * a + v1 - q * a * a * d * d) / (q * v1);
    [[tt / nf, tc / nf], [tc / nf, cc / nf]]
}

/// Delta-method variance of the indirect effect, divided by `n`.
pub fn indirect_variance(theta: &PathCoefficients, noise: &NoiseCov, q: f64, n: usize) -> f64 {
    let (v1, v2) = (noise.sigma1 * noise.sigma1, noise.sigma2 * noise.sigma2);
    let d = noise.delta;
    (v1 * theta.b * theta.b / q + v2 * (1.0 - d * d) * theta.a * theta.a / v1) / n as f64
}

/// Everything estimated for one session at a fixed `delta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleLevelFit {
    pub theta: PathCoefficients,
    pub noise: NoiseCov,
    pub residual_cov: ResidualCov,
    pub q_hat: f64,
    pub n: usize,
    pub asym_cov_theta: [[f64; 3]; 3],
    pub asym_cov_total: [[f64; 2]; 2],
    pub indirect_prod: f64,
    pub indirect_diff: f64,
    pub indirect_var: f64,
    pub loglik: f64,
}

/// Returns `(product, difference, variance)` estimates of the indirect effect.
pub fn indirect_effect(fit: &SingleLevelFit) -> (f64, f64, f64) {
    (fit.indirect_prod, fit.indirect_diff, fit.indirect_var)
}

/// Fits one session with variances estimated from the residual covariance.
pub fn fit_single(series: &TrialSeries, delta: f64) -> Result<SingleLevelFit> {
    fit_centered(&center(series), delta, None)
}

/// Fits one session with the error standard deviations supplied.
pub fn fit_single_known_noise(series: &TrialSeries, noise: &NoiseCov) -> Result<SingleLevelFit> {
    fit_centered(&center(series), noise.delta, Some((noise.sigma1, noise.sigma2)))
}

pub fn fit_centered(
    series: &CenteredSeries,
    delta: f64,
    known_sigmas: Option<(f64, f64)>,
) -> Result<SingleLevelFit> {
    check_delta(delta)?;
    let cp = series.cross_products();
    let rc = residual_cov_from(&cp)?;
    let noise = match known_sigmas {
        Some((s1, s2)) => NoiseCov::new(s1, s2, delta)?,
        None => {
            let (v1, v2) = estimate_sigmas(&rc, delta)?;
            NoiseCov::from_variances(v1, v2, delta)?
        }
    };
    let theta = theta_from(&cp, &noise)?;
    let q_hat = cp.zz / cp.n as f64;
    Ok(SingleLevelFit {
        asym_cov_theta: asym_cov_theta(&theta, &noise, q_hat, cp.n),
        asym_cov_total: asym_cov_total(&theta, &noise, q_hat, cp.n),
        indirect_prod: theta.a * theta.b,
        indirect_diff: theta.c_total - theta.c,
        indirect_var: indirect_variance(&theta, &noise, q_hat, cp.n),
        loglik: loglik(series, &theta, &noise),
        theta,
        noise,
        residual_cov: rc,
        q_hat,
        n: cp.n,
    })
}

/// Profile log-likelihood over `delta`: every other parameter at its
/// closed-form maximizer. The curve is flat because `delta` is not identified
/// from a single session.
pub fn profile_loglik_curve(series: &TrialSeries, delta_grid: &[f64]) -> Result<Vec<(f64, f64)>> {
    let centered = center(series);
    delta_grid
        .iter()
        .map(|&d| fit_centered(&centered, d, None).map(|fit| (d, fit.loglik)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn centered(z: &[f64], m: &[f64], r: &[f64]) -> CenteredSeries {
        center(&TrialSeries {
            z: z.to_vec(),
            m: m.to_vec(),
            r: r.to_vec(),
        })
    }

    const Z: [f64; 4] = [0.5, -0.5, 0.5, -0.5];

    #[test]
    fn a_hat_examples() {
        assert_eq!(fit_a(&centered(&Z, &[1., -1., -1., 1.], &[0.; 4])).unwrap(), 0.0);
        assert_eq!(fit_a(&centered(&Z, &[1., -1., 1., -1.], &[0.; 4])).unwrap(), 2.0);
    }

    #[test]
    fn c_total_examples() {
        assert_eq!(fit_c_total(&centered(&Z, &[0.; 4], &[1., 1., -1., -1.])).unwrap(), 0.0);
        let r: Vec<f64> = Z.iter().map(|z| 3.0 * z).collect();
        assert_eq!(fit_c_total(&centered(&Z, &[0.; 4], &r)).unwrap(), 3.0);
    }

    #[test]
    fn residual_cov_examples() {
        let m: Vec<f64> = Z.iter().map(|z| 2.0 * z).collect();
        let rc = residual_cov(&centered(&Z, &m, &[1., -1., -1., 1.])).unwrap();
        assert_eq!(rc.s11, 0.0);

        let rc = residual_cov(&centered(&Z, &[1., -1., -1., 1.], &[1., -1., -1., 1.])).unwrap();
        assert_eq!((rc.s11, rc.s12, rc.s22), (1.0, 1.0, 1.0));
    }

    #[test]
    fn sigma_examples() {
        let id = ResidualCov { s11: 1.0, s12: 0.0, s22: 1.0 };
        assert_eq!(estimate_sigmas(&id, 0.0).unwrap(), (1.0, 1.0));
        let coll = ResidualCov { s11: 1.0, s12: 1.0, s22: 1.0 };
        assert_eq!(estimate_sigmas(&coll, 0.4).unwrap().1, 0.0);
        let table1 = ResidualCov { s11: 1.0, s12: -9.5, s22: 91.0 };
        assert!((estimate_sigmas(&table1, 0.5).unwrap().1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sigma_errors() {
        let zero = ResidualCov { s11: 0.0, s12: 0.0, s22: 1.0 };
        assert!(matches!(estimate_sigmas(&zero, 0.0), Err(CmaError::SingularResiduals { .. })));
        let bad = ResidualCov { s11: 1.0, s12: 2.0, s22: 1.0 };
        assert!(matches!(estimate_sigmas(&bad, 0.0), Err(CmaError::NegativeVariance { .. })));
        // Rounding-level negatives are clamped.
        let tiny = ResidualCov { s11: 1.0, s12: 1.0 + 1e-14, s22: 1.0 };
        assert_eq!(estimate_sigmas(&tiny, 0.0).unwrap().1, 0.0);
        assert!(matches!(estimate_sigmas(&tiny, 1.0), Err(CmaError::InvalidDelta(_))));
    }

    #[test]
    fn theta_examples() {
        let s = centered(&Z, &[1., -1., -1., 1.], &[1., -1., -1., 1.]);
        let unit = NoiseCov::new(1.0, 1.0, 0.0).unwrap();
        let t = fit_theta(&s, &unit).unwrap();
        assert_eq!((t.a, t.c, t.b), (0.0, 0.0, 1.0));

        let half = NoiseCov::new(1.0, 1.0, 0.5).unwrap();
        let t = fit_theta(&s, &half).unwrap();
        assert_eq!((t.a, t.c, t.b), (0.0, 0.0, 0.5));
    }

    #[test]
    fn theta_rejects_collinear_design() {
        let m: Vec<f64> = Z.iter().map(|z| -4.0 * z).collect();
        let s = centered(&Z, &m, &[1., -1., -1., 1.]);
        let unit = NoiseCov::new(1.0, 1.0, 0.0).unwrap();
        assert!(matches!(fit_theta(&s, &unit), Err(CmaError::SingularDesign { .. })));
    }

    #[test]
    fn b_plugin_examples() {
        let coll = ResidualCov { s11: 1.0, s12: 1.0, s22: 1.0 };
        assert_eq!(fit_b_plugin(&coll, 0.7).unwrap(), 1.0);
        let table1 = ResidualCov { s11: 1.0, s12: -9.5, s22: 91.0 };
        assert!((fit_b_plugin(&table1, 0.5).unwrap() + 10.0).abs() < 1e-12);
        let any = ResidualCov { s11: 2.0, s12: 0.7, s22: 3.0 };
        assert_eq!(fit_b_plugin(&any, 0.0).unwrap(), 0.35);
    }

    #[test]
    fn loglik_examples() {
        let s = centered(&Z, &[1., -1., 1., -1.], &[0.5, -0.5, 0.5, -0.5]);
        let unit = NoiseCov::new(1.0, 1.0, 0.0).unwrap();
        // m = 2z, r = z: exact with A=2, C=1, B=0.
        let exact = PathCoefficients { a: 2.0, b: 0.0, c: 1.0, c_total: 1.0 };
        assert_eq!(loglik(&s, &exact, &unit), 0.0);
        // Residuals: e1 = m - z*A with A=0 gives sum e1^2 = 4; e2 = r gives 1; total 5.
        let off = PathCoefficients { a: 0.0, b: 0.0, c: 0.0, c_total: 0.0 };
        assert_eq!(loglik(&s, &off, &unit), -5.0);
        // e1 = 2z (sum 4) and e2 = sqrt(3) z (sum 3): squared Frobenius norm 7.
        let seven = PathCoefficients { a: 0.0, b: 0.0, c: 1.0 - 3f64.sqrt(), c_total: 0.0 };
        assert!((loglik(&s, &seven, &unit) + 7.0).abs() < 1e-12);
    }

    #[test]
    fn asymptotic_matrix_examples() {
        let theta = PathCoefficients { a: -5.0, b: -10.0, c: 4.0, c_total: 54.0 };
        let unit = NoiseCov::new(1.0, 1.0, 0.0).unwrap();
        let v = asym_cov_theta(&theta, &unit, 0.25, 1);
        let expected = [[4.0, 0.0, 0.0], [0.0, 29.0, 5.0], [0.0, 5.0, 1.0]];
        for i in 0..3 {
            for j in 0..3 {
                assert!((v[i][j] - expected[i][j]).abs() < 1e-12, "{i}{j}");
            }
        }
        let half = NoiseCov::new(1.0, 1.0, 0.5).unwrap();
        let v = asym_cov_theta(&theta, &half, 0.25, 100);
        assert!((v[0][0].sqrt() - 0.2).abs() < 1e-12);

        let vt = asym_cov_total(&theta, &half, 0.25, 100);
        assert!((vt[0][0].sqrt() - (91.0f64 / 0.25 / 100.0).sqrt()).abs() < 1e-12);
        assert!((vt[0][1] - (1.0 - 10.0 * 0.5) / 0.25 / 100.0).abs() < 1e-12);
        assert_eq!(vt[0][1], vt[1][0]);

        let no_b = PathCoefficients { b: 0.0, ..theta };
        let vt = asym_cov_total(&no_b, &unit, 0.25, 1);
        assert!((vt[0][0] - 4.0).abs() < 1e-12);

        let var = indirect_variance(&theta, &half, 0.25, 100);
        assert!((var.sqrt() - 2.046_338_193).abs() < 1e-6);
        let no_a = PathCoefficients { a: 0.0, ..theta };
        assert!((indirect_variance(&no_a, &half, 0.25, 100) - 100.0 / 0.25 / 100.0).abs() < 1e-12);
    }
}
