use cma_core::lmm::{fit_random_intercept, loglik_at, Criterion, GroupedValues};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn grouped(seed: u64, n: usize, k: usize, mean: f64, between: f64, within: f64) -> GroupedValues {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nb = Normal::new(0.0, between.sqrt()).unwrap();
    let nw = Normal::new(0.0, within.sqrt()).unwrap();
    let groups = (0..n)
        .map(|i| {
            let u = nb.sample(&mut rng);
            // Unbalanced: one to k values per subject.
            let ki = 1 + (i % k);
            (0..ki).map(|_| mean + u + nw.sample(&mut rng)).collect()
        })
        .collect();
    GroupedValues::new(groups).unwrap()
}

#[test]
fn ml_and_reml_agree_for_many_subjects() {
    let g = grouped(1, 500, 4, 2.0, 0.5, 0.5);
    let ml = fit_random_intercept(&g, Criterion::Ml).unwrap();
    let reml = fit_random_intercept(&g, Criterion::Reml).unwrap();
    let rel = |a: f64, b: f64| (a - b).abs() / b.abs();
    assert!(rel(ml.mean, reml.mean) < 0.02);
    assert!(rel(ml.var_between, reml.var_between) < 0.02);
    assert!(rel(ml.var_within, reml.var_within) < 0.02);
}

#[test]
fn fitted_parameters_maximize_loglik() {
    for (seed, criterion) in [(2, Criterion::Ml), (3, Criterion::Reml)] {
        let g = grouped(seed, 30, 4, -1.0, 0.8, 0.3);
        let fit = fit_random_intercept(&g, criterion).unwrap();
        let best = loglik_at(&g, fit.mean, fit.var_between, fit.var_within, criterion);
        assert!((best - fit.loglik).abs() < 1e-8 * best.abs());
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        for _ in 0..100 {
            let s = 10f64.powf(rng.random_range(-3.0..-0.5));
            // REML's quadratic term is evaluated at the supplied mean, so
            // only the variances are perturbed there.
            let mean = match criterion {
                Criterion::Ml => fit.mean + s * rng.random_range(-1.0..1.0),
                Criterion::Reml => fit.mean,
            };
            let vb = (fit.var_between * (1.0 + s * rng.random_range(-1.0..1.0))).max(1e-12);
            let vw = fit.var_within * (1.0 + s * rng.random_range(-1.0..1.0));
            assert!(loglik_at(&g, mean, vb, vw, criterion) <= best + 1e-9 * best.abs());
        }
    }
}

#[test]
fn blups_shrink_subject_means() {
    let g = grouped(4, 40, 5, 3.0, 0.4, 1.0);
    let fit = fit_random_intercept(&g, Criterion::Reml).unwrap();
    for (i, group) in g.groups().iter().enumerate() {
        let dev = group.iter().sum::<f64>() / group.len() as f64 - fit.mean;
        assert!(fit.blups[i].abs() <= dev.abs() + 1e-12, "subject {i}");
        assert!(fit.blups[i] * dev >= 0.0);
    }
}
