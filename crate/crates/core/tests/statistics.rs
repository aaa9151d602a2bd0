use gen_core::ball::{fit_ball, BallFitSettings, BallOptimizer};
use gen_core::data::{sample_mixture, MixtureSpec};
use gen_core::metrics::{mixture_modes, mode_coverage};
use gen_core::FeatureMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

#[test]
fn window_mass_matches_normal_cdf() {
    let spec = MixtureSpec::bench_1d();
    let n = 100_000;
    let xs = sample_mixture(&spec, n, &mut ChaCha8Rng::seed_from_u64(21)).unwrap();
    let radius = 0.15;
    let got = mode_coverage(&xs.rows(), &mixture_modes(&spec, radius)).unwrap();
    for (k, target) in spec.components.iter().enumerate() {
        let m = target.mean[0];
        let expected: f64 = spec
            .components
            .iter()
            .map(|c| {
                let normal = Normal::new(c.mean[0], c.spread[0].sqrt()).unwrap();
                c.weight * (normal.cdf(m + radius) - normal.cdf(m - radius))
            })
            .sum();
        let se = (expected * (1.0 - expected) / n as f64).sqrt();
        assert!(
            (got[k] - expected).abs() < 5.0 * se,
            "mode {k}: sampled {} expected {expected}",
            got[k]
        );
    }
}

#[test]
fn violator_fraction_settles_at_lambda() {
    let lambda = 0.3;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let data = sample_mixture(&MixtureSpec::single(vec![0.0, 0.0], vec![1.0, 1.0]), 200, &mut rng).unwrap();
    let mut fm = FeatureMap::new(2, 100, 5, &[0.0, 0.0]).unwrap();
    let settings = BallFitSettings {
        lambda,
        epochs: 300,
        batch_size: 20,
        lr: 1e-3,
    };
    let mut opt = BallOptimizer::new(&fm);
    let (_, log) = fit_ball(&mut fm, &data, &settings, &mut opt, &mut rng).unwrap();
    let tail = &log[log.len() - 50..];
    let mean = tail.iter().map(|s| s.violator_fraction).sum::<f64>() / tail.len() as f64;
    assert!((mean - lambda).abs() <= 0.1, "violator fraction {mean}");
}
