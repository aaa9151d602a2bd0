//! Sample-quality measures: histogram symmetric KL, 1-D Wasserstein,
//! per-mode coverage, and the Monte-Carlo kernel error sweep.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::MixtureSpec;
use crate::error::{check_len, Error, Result};
use crate::rff::FeatureMap;

pub const DEFAULT_BINS: usize = 100;
pub const DEFAULT_LAPLACE_ALPHA: f64 = 1e-3;
/// Half-width of the default histogram range, in component standard deviations.
pub const DEFAULT_ENVELOPE_SD: f64 = 4.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub mass: Vec<f64>,
    pub laplace_alpha: f64,
}

pub fn uniform_edges(lo: f64, hi: f64, bins: usize) -> Vec<f64> {
    let w = (hi - lo) / bins as f64;
    (0..=bins)
        .map(|k| if k == bins { hi } else { lo + w * k as f64 })
        .collect()
}

/// 100 equal-width bins over the mixture's +-4 sd envelope in dimension `j`.
pub fn default_edges(spec: &MixtureSpec, j: usize) -> Vec<f64> {
    let (lo, hi) = spec.envelope(j, DEFAULT_ENVELOPE_SD);
    uniform_edges(lo, hi, DEFAULT_BINS)
}

fn check_edges(edges: &[f64]) -> Result<()> {
    if edges.len() < 2 {
        return Err(Error::Empty("histogram edges"));
    }
    if edges.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::UnsortedEdges);
    }
    Ok(())
}

impl Histogram {
    /// Bins left-inclusive; samples outside the range land in the end bins.
    /// Smoothing adds `laplace_alpha` to every bin's empirical probability
    /// before renormalizing.
    pub fn build(samples: &[f64], edges: &[f64], laplace_alpha: f64) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty("histogram samples"));
        }
        check_edges(edges)?;
        if !(laplace_alpha >= 0.0) {
            return Err(Error::Config(format!(
                "laplace_alpha must be >= 0, got {laplace_alpha}"
            )));
        }
        let bins = edges.len() - 1;
        let mut counts = vec![0usize; bins];
        for &s in samples {
            // first edge strictly greater than s, minus one
            let k = edges.partition_point(|e| *e <= s);
            counts[k.saturating_sub(1).min(bins - 1)] += 1;
        }
        let n = samples.len() as f64;
        let norm = 1.0 + bins as f64 * laplace_alpha;
        let mass = counts
            .iter()
            .map(|&c| (c as f64 / n + laplace_alpha) / norm)
            .collect();
        Ok(Self {
            edges: edges.to_vec(),
            mass,
            laplace_alpha,
        })
    }

    pub fn from_mass(edges: Vec<f64>, mass: Vec<f64>) -> Result<Self> {
        check_edges(&edges)?;
        check_len("histogram mass", edges.len() - 1, mass.len())?;
        let total: f64 = mass.iter().sum();
        if mass.iter().any(|m| !(*m >= 0.0)) || (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidParams("histogram mass must be nonnegative and sum to 1".into()));
        }
        Ok(Self {
            edges,
            mass,
            laplace_alpha: 0.0,
        })
    }

    pub fn bins(&self) -> usize {
        self.mass.len()
    }
}

fn kl(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&a, &b)| if a == 0.0 { 0.0 } else { a * (a / b).ln() })
        .sum()
}

/// `KL(p || q) + KL(q || p)` in nats (the sum, not the average).
pub fn symmetric_kl(p: &Histogram, q: &Histogram) -> Result<f64> {
    if p.edges != q.edges {
        return Err(Error::EdgeMismatch);
    }
    Ok(kl(&p.mass, &q.mass) + kl(&q.mass, &p.mass))
}

/// Exact W1 between two equal-size empirical measures on the line.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("wasserstein samples"));
    }
    check_len("wasserstein sample counts", a.len(), b.len())?;
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let total: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum();
    Ok(total / a.len() as f64)
}

/// W1 after subsampling the larger set, without replacement, down to the
/// size of the smaller.
pub fn wasserstein_1d_resampled<R: Rng>(a: &[f64], b: &[f64], rng: &mut R) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("wasserstein samples"));
    }
    let n = a.len().min(b.len());
    let down = |v: &[f64], rng: &mut R| -> Vec<f64> {
        if v.len() == n {
            v.to_vec()
        } else {
            sample_indices(rng, v.len(), n).iter().map(|i| v[i]).collect()
        }
    };
    let a = down(a, rng);
    let b = down(b, rng);
    wasserstein_1d(&a, &b)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mode {
    pub mean: Vec<f64>,
    pub radius: f64,
    pub expected_weight: f64,
}

/// Fraction of samples within `radius` (Euclidean, inclusive) of each mode mean.
pub fn mode_coverage<P: AsRef<[f64]>>(samples: &[P], modes: &[Mode]) -> Result<Vec<f64>> {
    if modes.is_empty() {
        return Err(Error::Empty("modes"));
    }
    if samples.is_empty() {
        return Err(Error::Empty("mode coverage samples"));
    }
    let n = samples.len() as f64;
    modes
        .iter()
        .map(|m| {
            let mut hits = 0usize;
            for s in samples {
                let s = s.as_ref();
                check_len("mode dimension", m.mean.len(), s.len())?;
                let d2: f64 = s.iter().zip(&m.mean).map(|(a, b)| (a - b) * (a - b)).sum();
                hits += usize::from(d2 <= m.radius * m.radius);
            }
            Ok(hits as f64 / n)
        })
        .collect()
}

/// Modes at the component means of a mixture, with a shared radius.
pub fn mixture_modes(spec: &MixtureSpec, radius: f64) -> Vec<Mode> {
    spec.components
        .iter()
        .map(|c| Mode {
            mean: c.mean.clone(),
            radius,
            expected_weight: c.weight,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub num_features: usize,
    pub max_abs_error: f64,
    pub mean_abs_error: f64,
}

/// Pair `k` depends only on `(seed, k)`, so a run with more pairs evaluates a
/// superset of a run with fewer.
fn sweep_pairs(dims: usize, n_pairs: usize, seed: u64) -> Vec<(Vec<f64>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..n_pairs)
        .map(|_| {
            let mut draw = || -> Vec<f64> { (0..dims).map(|_| rng.random_range(-1.0..=1.0)).collect() };
            let x = draw();
            let y = draw();
            (x, y)
        })
        .collect()
}

fn sweep_map_seed(seed: u64, num_features: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ num_features as u64
}

/// For each feature count, builds a fresh map with the given diagonal
/// log-scale and measures `|K~ - K|` over `n_pairs` uniform pairs in `[-1, 1]^d`.
pub fn kernel_error_sweep(
    dims: usize,
    log_scale: &[f64],
    feature_counts: &[usize],
    n_pairs: usize,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if feature_counts.is_empty() {
        return Err(Error::Empty("feature counts"));
    }
    if n_pairs == 0 {
        return Err(Error::Empty("kernel sweep pairs"));
    }
    let pairs = sweep_pairs(dims, n_pairs, seed);
    feature_counts
        .iter()
        .map(|&nf| {
            let fm = FeatureMap::new(dims, nf, sweep_map_seed(seed, nf), log_scale)?;
            let errors: Vec<f64> = pairs
                .par_iter()
                .map(|(x, y)| -> Result<f64> {
                    Ok((fm.approx_kernel(x, y)? - fm.exact_kernel(x, y)?).abs())
                })
                .collect::<Result<_>>()?;
            let max_abs_error = errors.iter().cloned().fold(0.0, f64::max);
            let mean_abs_error = errors.iter().sum::<f64>() / errors.len() as f64;
            Ok(SweepRow {
                num_features: nf,
                max_abs_error,
                mean_abs_error,
            })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let cov: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let var: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    cov / var
}
