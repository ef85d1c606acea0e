use cma_core::multilevel::Method;
use cma_core::simulate::{
    gen_multilevel, gen_single, monte_carlo, replication_seed, Design, Estimator, MultilevelConfig,
    Quantity, SingleLevelConfig,
};
use cma_core::single_level::{asym_cov_theta, fit_single_known_noise};
use cma_core::{NoiseCov, PathCoefficients};
use rayon::ThreadPoolBuilder;

fn with_threads<T: Send>(n: usize, f: impl FnOnce() -> T + Send) -> T {
    ThreadPoolBuilder::new().num_threads(n).build().unwrap().install(f)
}

#[test]
fn results_do_not_depend_on_worker_count() {
    let cfg = MultilevelConfig {
        n_subjects: 8,
        seed: 12,
        ..MultilevelConfig::default()
    };
    let d1 = with_threads(1, || gen_multilevel(&cfg).unwrap());
    let d4 = with_threads(4, || gen_multilevel(&cfg).unwrap());
    assert_eq!(d1, d4);

    let design = Design::Multilevel(MultilevelConfig {
        n_subjects: 6,
        n_sessions: 3,
        trial_mean: 50.0,
        ..MultilevelConfig::default()
    });
    let est = [
        Estimator::Multilevel {
            method: Method::Ml,
            delta: None,
        },
        Estimator::Multilevel {
            method: Method::H,
            delta: None,
        },
    ];
    let s1 = with_threads(1, || monte_carlo(&design, &est, 6, 3).unwrap());
    let s4 = with_threads(4, || monte_carlo(&design, &est, 6, 3).unwrap());
    assert_eq!(s1, s4);
}

#[test]
fn generator_arm_means_match_model() {
    let cfg = SingleLevelConfig {
        n: 100_000,
        seed: 42,
        ..SingleLevelConfig::default()
    };
    let s = gen_single(&cfg).unwrap();
    let (a, b, c) = (cfg.a, cfg.b, cfg.c);
    let var_m = cfg.sigma1.powi(2);
    let var_r = b * b * var_m + cfg.sigma2.powi(2) + 2.0 * b * cfg.delta * cfg.sigma1 * cfg.sigma2;
    for arm in [0.0, 1.0] {
        let idx: Vec<usize> = (0..s.n()).filter(|&t| s.z[t] == arm).collect();
        let k = idx.len() as f64;
        let mm = idx.iter().map(|&t| s.m[t]).sum::<f64>() / k;
        let mr = idx.iter().map(|&t| s.r[t]).sum::<f64>() / k;
        let (em, er) = (a * arm, (c + a * b) * arm);
        assert!((mm - em).abs() < 3.0 * (var_m / k).sqrt(), "arm {arm}: M mean {mm} vs {em}");
        assert!((mr - er).abs() < 3.0 * (var_r / k).sqrt(), "arm {arm}: R mean {mr} vs {er}");
    }
}

#[test]
fn confounder_mode_matches_direct_parameterization() {
    let confounded = SingleLevelConfig {
        confounder_mode: true,
        u_sd: 0.8,
        g: 1.5,
        sigma1: 0.6,
        sigma2: 0.9,
        ..SingleLevelConfig::default()
    };
    let (s1, s2, d) = confounded.implied_noise();
    let direct = SingleLevelConfig {
        sigma1: s1,
        sigma2: s2,
        delta: d,
        ..SingleLevelConfig::default()
    };
    let est = [Estimator::Single { delta: d }];
    let reps = 400;
    let mc = monte_carlo(&Design::Single(confounded), &est, reps, 1).unwrap();
    let md = monte_carlo(&Design::Single(direct), &est, reps, 2).unwrap();
    for q in [Quantity::A, Quantity::C, Quantity::B] {
        let x = mc.estimators[0].get(q).unwrap();
        let y = md.estimators[0].get(q).unwrap();
        let se = ((x.sd.powi(2) + y.sd.powi(2)) / reps as f64).sqrt();
        assert!((x.mean - y.mean).abs() < 4.0 * se, "{q:?}: {} vs {}", x.mean, y.mean);
    }
}

/// Single-level design sessions fitted with the true error covariance.
fn known_noise_estimates(reps: usize) -> Vec<[f64; 3]> {
    let noise = NoiseCov::new(1.0, 1.0, 0.5).unwrap();
    (0..reps)
        .map(|r| {
            let cfg = SingleLevelConfig {
                seed: replication_seed(77, r),
                ..SingleLevelConfig::default()
            };
            let t = fit_single_known_noise(&gen_single(&cfg).unwrap(), &noise)
                .unwrap()
                .theta;
            [t.a, t.c, t.b]
        })
        .collect()
}

#[test]
fn known_noise_estimates_attain_fisher_bound() {
    let reps = 2000;
    let est = known_noise_estimates(reps);
    let mean: Vec<f64> = (0..3).map(|j| est.iter().map(|e| e[j]).sum::<f64>() / reps as f64).collect();
    let truth = PathCoefficients {
        a: -5.0,
        b: -10.0,
        c: 4.0,
        c_total: 54.0,
    };
    let v = asym_cov_theta(&truth, &NoiseCov::new(1.0, 1.0, 0.5).unwrap(), 0.25, 100);
    for i in 0..3 {
        for j in 0..3 {
            let emp = est.iter().map(|e| (e[i] - mean[i]) * (e[j] - mean[j])).sum::<f64>()
                / (reps - 1) as f64;
            // Exact zeros are compared on the correlation scale.
            let scale = if v[i][j] == 0.0 { (v[i][i] * v[j][j]).sqrt() } else { v[i][j].abs() };
            assert!(
                (emp - v[i][j]).abs() < 0.1 * scale,
                "entry ({i},{j}): empirical {emp} vs {}",
                v[i][j]
            );
        }
    }
}

#[test]
fn standardized_a_is_near_normal() {
    let reps = 2000;
    let a: Vec<f64> = known_noise_estimates(reps).iter().map(|e| e[0]).collect();
    let m = a.iter().sum::<f64>() / reps as f64;
    let sd = (a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    let z: Vec<f64> = a.iter().map(|x| (x - m) / sd).collect();
    let skew = z.iter().map(|v| v.powi(3)).sum::<f64>() / reps as f64;
    let kurt = z.iter().map(|v| v.powi(4)).sum::<f64>() / reps as f64 - 3.0;
    assert!(skew.abs() < 0.15, "skewness {skew}");
    assert!(kurt.abs() < 0.3, "excess kurtosis {kurt}");
}
