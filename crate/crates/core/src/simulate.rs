//! Seeded data generators and a Monte Carlo driver.
//!
//! Randomness comes from ChaCha8 streams whose 64-bit seeds are derived by
//! SplitMix64 mixing of the base seed with a tuple of stream coordinates:
//!
//! | stream | coordinates |
//! |--------|-------------|
//! | single-level series | `(0)` |
//! | subject effects `u_i` | `(1, i)` |
//! | session `(i, k)`: `eta_ik`, trial count, trials | `(2, i, k)` |
//! | Monte Carlo replication `r` | base seed replaced by `mix(seed, (3, r))` |
//! | wild-bootstrap replicate `j` | `(4, j)` |
//!
//! Normal variates use the ziggurat sampler of `rand_distr::StandardNormal`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Bernoulli, Distribution, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{MultilevelDataset, SessionKey, TrialSeries};
use crate::error::{CmaError, Result};
use crate::multilevel::{fit_methods, Method, MixedEffectsFit};
use crate::numeric::{mean, sample_sd};
use crate::single_level::{fit_single, SingleLevelFit};

pub const MIN_TRIALS: usize = 10;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed of the stream at `coords` under `seed`.
pub fn stream_seed(seed: u64, coords: &[u64]) -> u64 {
    let mut h = splitmix64(seed);
    for &c in coords {
        h = splitmix64(h ^ splitmix64(c.wrapping_add(0x5851_F42D_4C95_7F2D)));
    }
    h
}

pub fn stream(seed: u64, coords: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(seed, coords))
}

/// Base seed of Monte Carlo replication `r`.
pub fn replication_seed(seed: u64, r: usize) -> u64 {
    stream_seed(seed, &[3, r as u64])
}

fn invalid(key: &str, reason: impl Into<String>) -> CmaError {
    CmaError::InvalidConfig {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn check_positive(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must be positive, got {v}")))
    }
}

fn check_finite(key: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(invalid(key, "must be finite"))
    }
}

fn check_corr(key: &str, v: f64) -> Result<()> {
    if v.is_finite() && v.abs() < 1.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must lie in (-1, 1), got {v}")))
    }
}

fn check_prob(key: &str, v: f64) -> Result<()> {
    if v > 0.0 && v < 1.0 {
        Ok(())
    } else {
        Err(invalid(key, format!("must lie in (0, 1), got {v}")))
    }
}

/// Values for the three paths, by name.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Triple {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Triple {
    pub const fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    pub const fn splat(v: f64) -> Self {
        Self { a: v, b: v, c: v }
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.a, self.b, self.c]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SingleLevelConfig {
    pub n: usize,
    pub a: f64,
    pub b: f64,
    pub c: f64,
    /// Error SDs. In confounder mode these are the SDs of the independent
    /// parts of the errors.
    pub sigma1: f64,
    pub sigma2: f64,
    /// Error correlation; ignored in confounder mode.
    pub delta: f64,
    pub p_treat: f64,
    pub seed: u64,
    #[serde(default)]
    pub confounder_mode: bool,
    #[serde(default)]
    pub u_sd: f64,
    #[serde(default)]
    pub g: f64,
}

impl Default for SingleLevelConfig {
    fn default() -> Self {
        Self {
            n: 100,
            a: -5.0,
            b: -10.0,
            c: 4.0,
            sigma1: 1.0,
            sigma2: 1.0,
            delta: 0.5,
            p_treat: 0.5,
            seed: 0,
            confounder_mode: false,
            u_sd: 0.0,
            g: 0.0,
        }
    }
}

impl SingleLevelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n < 4 {
            return Err(invalid("n", format!("must be at least 4, got {}", self.n)));
        }
        check_finite("a", self.a)?;
        check_finite("b", self.b)?;
        check_finite("c", self.c)?;
        check_positive("sigma1", self.sigma1)?;
        check_positive("sigma2", self.sigma2)?;
        check_prob("p_treat", self.p_treat)?;
        if self.confounder_mode {
            check_positive("u_sd", self.u_sd)?;
            check_finite("g", self.g)?;
        } else {
            check_corr("delta", self.delta)?;
        }
        Ok(())
    }

    /// `(sigma1, sigma2, delta)` of the errors actually generated.
    pub fn implied_noise(&self) -> (f64, f64, f64) {
        if !self.confounder_mode {
            return (self.sigma1, self.sigma2, self.delta);
        }
        let vu = self.u_sd * self.u_sd;
        let s1 = (vu + self.sigma1 * self.sigma1).sqrt();
        let s2 = (self.g * self.g * vu + self.sigma2 * self.sigma2).sqrt();
        (s1, s2, self.g * vu / (s1 * s2))
    }

    /// Bias-law limits `(C - A delta s2/s1, B + delta s2/s1)` of the
    /// uncorrelated-error estimates.
    pub fn baron_kenny_limits(&self) -> (f64, f64) {
        let (s1, s2, d) = self.implied_noise();
        let shift = d * s2 / s1;
        (self.c - self.a * shift, self.b + shift)
    }
}

/// Treatment draws, redrawn until both arms are present.
fn draw_treatment(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<f64> {
    let bern = Bernoulli::new(p).expect("validated probability");
    loop {
        let z: Vec<f64> = (0..n).map(|_| if bern.sample(rng) { 1.0 } else { 0.0 }).collect();
        let ones = z.iter().filter(|&&v| v == 1.0).count();
        if ones > 0 && ones < n {
            return z;
        }
    }
}

struct Trials<'a> {
    n: usize,
    coef: [f64; 3],
    cfg: &'a SingleLevelConfig,
}

fn draw_trials(rng: &mut ChaCha8Rng, spec: Trials<'_>) -> TrialSeries {
    let cfg = spec.cfg;
    let [a, b, c] = spec.coef;
    let z = draw_treatment(rng, spec.n, cfg.p_treat);
    let mut m = Vec::with_capacity(spec.n);
    let mut r = Vec::with_capacity(spec.n);
    let rho = (1.0 - cfg.delta * cfg.delta).sqrt();
    for &zt in &z {
        let (e1, e2) = if cfg.confounder_mode {
            let u: f64 = cfg.u_sd * rng.sample::<f64, _>(StandardNormal);
            let t1: f64 = rng.sample(StandardNormal);
            let t2: f64 = rng.sample(StandardNormal);
            (u + cfg.sigma1 * t1, cfg.g * u + cfg.sigma2 * t2)
        } else {
            let x1: f64 = rng.sample(StandardNormal);
            let x2: f64 = rng.sample(StandardNormal);
            (cfg.sigma1 * x1, cfg.sigma2 * (cfg.delta * x1 + rho * x2))
        };
        let mt = zt * a + e1;
        m.push(mt);
        r.push(zt * c + mt * b + e2);
    }
    TrialSeries { z, m, r }
}

/// One session from `cfg`.
pub fn gen_single(cfg: &SingleLevelConfig) -> Result<TrialSeries> {
    cfg.validate()?;
    let mut rng = stream(cfg.seed, &[0]);
    Ok(draw_trials(
        &mut rng,
        Trials {
            n: cfg.n,
            coef: [cfg.a, cfg.b, cfg.c],
            cfg,
        },
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultilevelConfig {
    pub n_subjects: usize,
    pub n_sessions: usize,
    /// Poisson mean of the trial count per session.
    pub trial_mean: f64,
    pub fixed: Triple,
    /// Between-subject variances.
    pub psi: Triple,
    /// Within-subject session variances.
    pub lambda: Triple,
    pub sigma1: f64,
    pub sigma2: f64,
    pub delta: f64,
    pub p_treat: f64,
    pub seed: u64,
}

impl Default for MultilevelConfig {
    fn default() -> Self {
        Block::Alternative.multilevel(0)
    }
}

impl MultilevelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_subjects < 2 {
            return Err(invalid("n_subjects", "must be at least 2"));
        }
        if self.n_sessions < 1 {
            return Err(invalid("n_sessions", "must be at least 1"));
        }
        if !(self.trial_mean.is_finite() && self.trial_mean >= MIN_TRIALS as f64) {
            return Err(invalid(
                "trial_mean",
                format!("must be at least {MIN_TRIALS}, got {}", self.trial_mean),
            ));
        }
        for (name, t) in [("fixed", self.fixed)] {
            for (f, v) in [("a", t.a), ("b", t.b), ("c", t.c)] {
                check_finite(&format!("{name}.{f}"), v)?;
            }
        }
        for (name, t) in [("psi", self.psi), ("lambda", self.lambda)] {
            for (f, v) in [("a", t.a), ("b", t.b), ("c", t.c)] {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(invalid(&format!("{name}.{f}"), "must be a nonnegative variance"));
                }
            }
        }
        check_positive("sigma1", self.sigma1)?;
        check_positive("sigma2", self.sigma2)?;
        check_corr("delta", self.delta)?;
        check_prob("p_treat", self.p_treat)?;
        Ok(())
    }

    fn session_config(&self) -> SingleLevelConfig {
        SingleLevelConfig {
            n: MIN_TRIALS,
            a: self.fixed.a,
            b: self.fixed.b,
            c: self.fixed.c,
            sigma1: self.sigma1,
            sigma2: self.sigma2,
            delta: self.delta,
            p_treat: self.p_treat,
            seed: self.seed,
            confounder_mode: false,
            u_sd: 0.0,
            g: 0.0,
        }
    }
}

fn diag_normal(rng: &mut ChaCha8Rng, var: Triple) -> [f64; 3] {
    var.to_array().map(|v| v.sqrt() * rng.sample::<f64, _>(StandardNormal))
}

/// A dataset from `cfg` with the true session coefficients `(A, B, C)`.
pub fn gen_multilevel_with_truth(
    cfg: &MultilevelConfig,
) -> Result<(MultilevelDataset, BTreeMap<SessionKey, [f64; 3]>)> {
    cfg.validate()?;
    let base = cfg.session_config();
    let poisson = Poisson::new(cfg.trial_mean).map_err(|e| invalid("trial_mean", e.to_string()))?;
    let fixed = cfg.fixed.to_array();
    let subjects: Vec<Vec<(SessionKey, [f64; 3], TrialSeries)>> = (1..=cfg.n_subjects as u32)
        .into_par_iter()
        .map(|i| {
            let u = diag_normal(&mut stream(cfg.seed, &[1, i as u64]), cfg.psi);
            (1..=cfg.n_sessions as u32)
                .map(|k| {
                    let mut rng = stream(cfg.seed, &[2, i as u64, k as u64]);
                    let eta = diag_normal(&mut rng, cfg.lambda);
                    let coef = [0, 1, 2].map(|j| fixed[j] + u[j] + eta[j]);
                    let draw: f64 = poisson.sample(&mut rng);
                    let n = (draw as usize).max(MIN_TRIALS);
                    let series = draw_trials(&mut rng, Trials { n, coef, cfg: &base });
                    (SessionKey::new(i, k), coef, series)
                })
                .collect()
        })
        .collect();
    let mut sessions = BTreeMap::new();
    let mut truth = BTreeMap::new();
    for (key, coef, series) in subjects.into_iter().flatten() {
        truth.insert(key, coef);
        sessions.insert(key, series);
    }
    Ok((MultilevelDataset::new(sessions)?, truth))
}

pub fn gen_multilevel(cfg: &MultilevelConfig) -> Result<MultilevelDataset> {
    gen_multilevel_with_truth(cfg).map(|(d, _)| d)
}

/// The five simulation blocks shared by the single-level and multilevel
/// studies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Block {
    /// `A = -5, B = -10, C = 4`, `delta = 0.5`.
    Alternative,
    /// `A = 0`.
    NullA,
    /// `B = 0`.
    NullB,
    /// `A = B = 0`.
    NullAB,
    /// All effects nonzero, `delta = 0`.
    Uncorrelated,
}

impl Block {
    pub const ALL: [Block; 5] = [
        Block::Alternative,
        Block::NullA,
        Block::NullB,
        Block::NullAB,
        Block::Uncorrelated,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Block::Alternative => "alternative",
            Block::NullA => "null_a",
            Block::NullB => "null_b",
            Block::NullAB => "null_ab",
            Block::Uncorrelated => "uncorrelated",
        }
    }

    /// `(A, B, C, delta)`.
    pub fn truth(self) -> (f64, f64, f64, f64) {
        match self {
            Block::Alternative => (-5.0, -10.0, 4.0, 0.5),
            Block::NullA => (0.0, -10.0, 4.0, 0.5),
            Block::NullB => (-5.0, 0.0, 4.0, 0.5),
            Block::NullAB => (0.0, 0.0, 4.0, 0.5),
            Block::Uncorrelated => (-5.0, -10.0, 4.0, 0.0),
        }
    }

    /// Single-session design: `n = 100`, unit error variances, `p = 0.5`.
    pub fn single(self, seed: u64) -> SingleLevelConfig {
        let (a, b, c, delta) = self.truth();
        SingleLevelConfig {
            a,
            b,
            c,
            delta,
            seed,
            ..SingleLevelConfig::default()
        }
    }

    /// Multilevel design: 50 subjects, 4 sessions, Poisson(100) trials, all
    /// variance components 0.5, unit error variances.
    pub fn multilevel(self, seed: u64) -> MultilevelConfig {
        let (a, b, c, delta) = self.truth();
        MultilevelConfig {
            n_subjects: 50,
            n_sessions: 4,
            trial_mean: 100.0,
            fixed: Triple::new(a, b, c),
            psi: Triple::splat(0.5),
            lambda: Triple::splat(0.5),
            sigma1: 1.0,
            sigma2: 1.0,
            delta,
            p_treat: 0.5,
            seed,
        }
    }
}

impl std::str::FromStr for Block {
    type Err = CmaError;

    fn from_str(s: &str) -> Result<Self> {
        Block::ALL
            .into_iter()
            .find(|b| b.name() == s)
            .ok_or_else(|| CmaError::InvalidArgument(format!("unknown block '{s}'")))
    }
}

/// A task-fMRI-like design: 97 subjects, 4 sessions, Poisson(91) trials,
/// one treated trial in four, small effects and a negative error
/// correlation.
pub fn fmri_mimic(seed: u64) -> MultilevelConfig {
    MultilevelConfig {
        n_subjects: 97,
        n_sessions: 4,
        trial_mean: 91.0,
        fixed: Triple::new(0.0099, 0.5455, -0.0017),
        psi: Triple::new(2.5e-3, 3e-2, 5e-3),
        lambda: Triple::new(1e-3, 1e-2, 2e-3),
        sigma1: 0.1,
        sigma2: 0.1,
        delta: -0.254,
        p_treat: 0.25,
        seed,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Design {
    Single(SingleLevelConfig),
    Multilevel(MultilevelConfig),
}

impl Design {
    pub fn validate(&self) -> Result<()> {
        match self {
            Design::Single(c) => c.validate(),
            Design::Multilevel(c) => c.validate(),
        }
    }

    fn reseeded(&self, seed: u64) -> Self {
        let mut d = self.clone();
        match &mut d {
            Design::Single(c) => c.seed = seed,
            Design::Multilevel(c) => c.seed = seed,
        }
        d
    }

    /// True values of the summary quantities.
    pub fn truth(&self) -> BTreeMap<Quantity, f64> {
        let (a, b, c, delta, var) = match self {
            Design::Single(cfg) => {
                let (_, _, d) = cfg.implied_noise();
                (cfg.a, cfg.b, cfg.c, d, None)
            }
            Design::Multilevel(cfg) => (
                cfg.fixed.a,
                cfg.fixed.b,
                cfg.fixed.c,
                cfg.delta,
                Some((cfg.psi, cfg.lambda)),
            ),
        };
        let mut t = BTreeMap::from([
            (Quantity::Delta, delta),
            (Quantity::A, a),
            (Quantity::C, c),
            (Quantity::B, b),
            (Quantity::CTotal, c + a * b),
            (Quantity::AbProd, a * b),
            (Quantity::AbDiff, a * b),
        ]);
        if let Some((psi, lambda)) = var {
            t.insert(Quantity::PsiA, psi.a);
            t.insert(Quantity::PsiC, psi.c);
            t.insert(Quantity::PsiB, psi.b);
            t.insert(Quantity::Lambda, (lambda.a + lambda.b + lambda.c) / 3.0);
        }
        t
    }
}

/// Summary quantities in table column order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quantity {
    Delta,
    A,
    C,
    B,
    CTotal,
    AbProd,
    AbDiff,
    PsiA,
    PsiC,
    PsiB,
    Lambda,
}

impl Quantity {
    pub const ALL: [Quantity; 11] = [
        Quantity::Delta,
        Quantity::A,
        Quantity::C,
        Quantity::B,
        Quantity::CTotal,
        Quantity::AbProd,
        Quantity::AbDiff,
        Quantity::PsiA,
        Quantity::PsiC,
        Quantity::PsiB,
        Quantity::Lambda,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Quantity::Delta => "delta",
            Quantity::A => "A",
            Quantity::C => "C",
            Quantity::B => "B",
            Quantity::CTotal => "C_total",
            Quantity::AbProd => "AB_p",
            Quantity::AbDiff => "AB_d",
            Quantity::PsiA => "sigma2_alpha",
            Quantity::PsiC => "sigma2_gamma",
            Quantity::PsiB => "sigma2_beta",
            Quantity::Lambda => "lambda2",
        }
    }
}

impl std::str::FromStr for Quantity {
    type Err = CmaError;

    /// Accepts [`Quantity::name`] in any letter case.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Quantity::ALL
            .into_iter()
            .find(|q| q.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| CmaError::UnknownQuantity(s.to_string()))
    }
}

/// An estimator applied to every replication.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Estimator {
    /// Closed-form single-level fit at a given `delta`; applies to
    /// single-session designs.
    Single { delta: f64 },
    /// A multilevel procedure; `delta` is used by [`Method::Ts`].
    Multilevel { method: Method, delta: Option<f64> },
}

impl Estimator {
    pub fn label(&self) -> String {
        match self {
            Estimator::Single { delta } if *delta == 0.0 => "BK".to_string(),
            Estimator::Single { delta } => format!("CMA-delta ({delta})"),
            Estimator::Multilevel {
                method: Method::Ts,
                delta: Some(d),
            } => format!("CMA-ts ({d})"),
            Estimator::Multilevel { method, .. } => method.label().to_string(),
        }
    }
}

pub fn single_values(fit: &SingleLevelFit) -> BTreeMap<Quantity, f64> {
    let t = &fit.theta;
    BTreeMap::from([
        (Quantity::A, t.a),
        (Quantity::C, t.c),
        (Quantity::B, t.b),
        (Quantity::CTotal, t.c_total),
        (Quantity::AbProd, fit.indirect_prod),
        (Quantity::AbDiff, fit.indirect_diff),
    ])
}

pub fn multilevel_values(fit: &MixedEffectsFit) -> BTreeMap<Quantity, f64> {
    let mut v = BTreeMap::from([
        (Quantity::A, fit.a()),
        (Quantity::C, fit.c()),
        (Quantity::B, fit.b()),
        (Quantity::CTotal, fit.c_total),
        (Quantity::AbProd, fit.indirect_prod),
        (Quantity::AbDiff, fit.indirect_diff),
        (Quantity::PsiA, fit.psi[0]),
        (Quantity::PsiC, fit.psi[2]),
        (Quantity::PsiB, fit.psi[1]),
        (Quantity::Lambda, fit.lambda_pooled()),
    ]);
    if fit.method.estimates_delta() {
        v.insert(Quantity::Delta, fit.delta_hat);
    }
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantitySummary {
    pub quantity: Quantity,
    pub mean: f64,
    pub sd: f64,
    pub mse: Option<f64>,
    pub truth: Option<f64>,
    /// Per-replication values in replication order (failed replications
    /// omitted).
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicationFailure {
    pub replication: usize,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSummary {
    pub estimator: Estimator,
    pub label: String,
    pub n_ok: usize,
    pub failures: Vec<ReplicationFailure>,
    pub quantities: Vec<QuantitySummary>,
}

impl EstimatorSummary {
    pub fn get(&self, q: Quantity) -> Option<&QuantitySummary> {
        self.quantities.iter().find(|s| s.quantity == q)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloSummary {
    pub design: Design,
    pub seed: u64,
    pub replications: usize,
    pub estimators: Vec<EstimatorSummary>,
}

impl MonteCarloSummary {
    pub fn estimator(&self, label: &str) -> Option<&EstimatorSummary> {
        self.estimators.iter().find(|e| e.label == label)
    }
}

type Record = std::result::Result<BTreeMap<Quantity, f64>, String>;

fn run_replication(design: &Design, estimators: &[Estimator]) -> Vec<Record> {
    match design {
        Design::Single(cfg) => {
            let series = match gen_single(cfg) {
                Ok(s) => s,
                Err(e) => return vec![Err(e.to_string()); estimators.len()],
            };
            estimators
                .iter()
                .map(|est| match est {
                    Estimator::Single { delta } => fit_single(&series, *delta)
                        .map(|f| single_values(&f))
                        .map_err(|e| e.to_string()),
                    Estimator::Multilevel { .. } => {
                        Err("multilevel estimator on a single-session design".to_string())
                    }
                })
                .collect()
        }
        Design::Multilevel(cfg) => {
            let data = match gen_multilevel(cfg) {
                Ok(d) => d,
                Err(e) => return vec![Err(e.to_string()); estimators.len()],
            };
            // Group the multilevel estimators so the h-likelihood search is
            // shared between CMA-h and CMA-h-ts.
            let mut out: Vec<Option<Record>> = vec![None; estimators.len()];
            let mut by_delta: Vec<(Option<f64>, Vec<(usize, Method)>)> = Vec::new();
            for (idx, est) in estimators.iter().enumerate() {
                match est {
                    Estimator::Single { .. } => {
                        out[idx] = Some(Err("single estimator on a multilevel design".into()))
                    }
                    Estimator::Multilevel { method, delta } => {
                        let d = if *method == Method::Ts { *delta } else { None };
                        match by_delta.iter_mut().find(|(k, _)| *k == d) {
                            Some((_, v)) => v.push((idx, *method)),
                            None => by_delta.push((d, vec![(idx, *method)])),
                        }
                    }
                }
            }
            for (d, group) in by_delta {
                let methods: Vec<Method> = group.iter().map(|(_, m)| *m).collect();
                let fits = fit_methods(&data, &methods, d);
                for ((idx, _), (_, fit)) in group.iter().zip(fits) {
                    out[*idx] = Some(
                        fit.map(|f| multilevel_values(&f))
                            .map_err(|e| e.to_string()),
                    );
                }
            }
            out.into_iter().map(|r| r.expect("every slot filled")).collect()
        }
    }
}

/// Largest tolerated number of failed replications per estimator.
pub fn failure_limit(reps: usize) -> usize {
    reps / 20
}

/// Runs every estimator on `reps` independently seeded datasets from
/// `design`. Replication `r` uses base seed [`replication_seed`]`(seed, r)`.
pub fn monte_carlo(
    design: &Design,
    estimators: &[Estimator],
    reps: usize,
    seed: u64,
) -> Result<MonteCarloSummary> {
    if reps == 0 {
        return Err(CmaError::InvalidArgument("reps must be at least 1".into()));
    }
    if estimators.is_empty() {
        return Err(CmaError::InvalidArgument("no estimators given".into()));
    }
    design.validate()?;
    let records: Vec<Vec<Record>> = (0..reps)
        .into_par_iter()
        .map(|r| run_replication(&design.reseeded(replication_seed(seed, r)), estimators))
        .collect();

    let truth = design.truth();
    let limit = failure_limit(reps);
    let mut summaries = Vec::with_capacity(estimators.len());
    for (e, est) in estimators.iter().enumerate() {
        let mut failures = Vec::new();
        let mut ok: Vec<&BTreeMap<Quantity, f64>> = Vec::new();
        for (r, rec) in records.iter().enumerate() {
            match &rec[e] {
                Ok(v) => ok.push(v),
                Err(msg) => failures.push(ReplicationFailure {
                    replication: r,
                    message: msg.clone(),
                }),
            }
        }
        if failures.len() > limit {
            return Err(CmaError::TooManyFailures {
                failed: failures.len(),
                total: reps,
                limit,
            });
        }
        let quantities = Quantity::ALL
            .iter()
            .filter(|q| ok.first().is_some_and(|v| v.contains_key(q)))
            .map(|&q| {
                let values: Vec<f64> = ok.iter().map(|v| v[&q]).collect();
                let t = truth.get(&q).copied();
                let mse = t.map(|t| mean(&values.iter().map(|v| (v - t) * (v - t)).collect::<Vec<_>>()));
                QuantitySummary {
                    quantity: q,
                    mean: mean(&values),
                    sd: sample_sd(&values),
                    mse,
                    truth: t,
                    values,
                }
            })
            .collect();
        summaries.push(EstimatorSummary {
            estimator: *est,
            label: est.label(),
            n_ok: ok.len(),
            failures,
            quantities,
        });
    }
    Ok(MonteCarloSummary {
        design: design.clone(),
        seed,
        replications: reps,
        estimators: summaries,
    })
}
