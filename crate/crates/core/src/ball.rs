//! Enclosing ball in feature space.
//!
//! The ball is fit on the soft-margin primal objective
//!
//! ```text
//! J_d(r, c, log_scale) = lambda * r + 1/N sum_i max(0, ||phi(x_i) - c||^2 - r)
//! ```
//!
//! where `r` is the squared radius, optimized directly and projected onto
//! `r >= 0` after every step.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::data::Dataset;
use crate::error::{check_len, Error, Result};
use crate::reduce_in_order;
use crate::rff::FeatureMap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ball {
    pub center: Vec<f64>,
    pub radius_sq: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BallGradients {
    pub d_radius_sq: f64,
    pub d_center: Vec<f64>,
    pub d_log_scale: Vec<f64>,
}

/// Adam moments for the three ball parameter groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BallOptimizer {
    pub radius_sq: AdamState,
    pub center: AdamState,
    pub log_scale: AdamState,
}

impl BallOptimizer {
    pub fn new(fm: &FeatureMap) -> Self {
        Self {
            radius_sq: AdamState::new(1),
            center: AdamState::new(fm.dims_out()),
            log_scale: AdamState::new(fm.dims_in()),
        }
    }
}

/// Fraction used for the initial squared radius.
pub const INIT_RADIUS_QUANTILE: f64 = 0.9;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Ball {
    pub fn new(center: Vec<f64>, radius_sq: f64, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Config(format!("lambda must be > 0, got {lambda}")));
        }
        if !(radius_sq >= 0.0) {
            return Err(Error::Config(format!(
                "squared radius must be >= 0, got {radius_sq}"
            )));
        }
        Ok(Self {
            center,
            radius_sq,
            lambda,
        })
    }

    /// Centers the ball on the mean feature of `batch`, with squared radius
    /// at the 90th percentile of squared distances to that mean.
    pub fn initialize<P: AsRef<[f64]> + Sync>(
        fm: &FeatureMap,
        batch: &[P],
        lambda: f64,
    ) -> Result<Self> {
        if batch.is_empty() {
            return Err(Error::Empty("ball initialization batch"));
        }
        let phis = fm.map_batch(batch)?;
        let mut center = vec![0.0; fm.dims_out()];
        for phi in &phis {
            for (c, p) in center.iter_mut().zip(phi) {
                *c += p;
            }
        }
        let n = phis.len() as f64;
        center.iter_mut().for_each(|c| *c /= n);
        let mut dists: Vec<f64> = phis.iter().map(|p| sq_dist(p, &center)).collect();
        dists.sort_by(f64::total_cmp);
        let radius_sq = quantile_sorted(&dists, INIT_RADIUS_QUANTILE);
        Self::new(center, radius_sq, lambda)
    }

    pub fn dims(&self) -> usize {
        self.center.len()
    }

    pub fn sq_distance(&self, phi: &[f64]) -> f64 {
        assert_eq!(phi.len(), self.center.len(), "feature length");
        sq_dist(phi, &self.center)
    }

    /// `max(0, ||phi - c||^2 - r)`.
    pub fn hinge_violation(&self, phi: &[f64]) -> f64 {
        (self.sq_distance(phi) - self.radius_sq).max(0.0)
    }

    fn check_map(&self, fm: &FeatureMap) -> Result<()> {
        check_len("ball center", fm.dims_out(), self.center.len())
    }

    pub fn objective<P: AsRef<[f64]> + Sync>(&self, fm: &FeatureMap, batch: &[P]) -> Result<f64> {
        if batch.is_empty() {
            return Err(Error::Empty("ball objective batch"));
        }
        self.check_map(fm)?;
        let phis = fm.map_batch(batch)?;
        let hinge: f64 = phis.iter().map(|p| self.hinge_violation(p)).sum();
        Ok(self.lambda * self.radius_sq + hinge / batch.len() as f64)
    }

    /// Subgradient of [`Ball::objective`]. Points exactly on the boundary
    /// contribute zero.
    pub fn gradients<P: AsRef<[f64]> + Sync>(
        &self,
        fm: &FeatureMap,
        batch: &[P],
    ) -> Result<BallGradients> {
        if batch.is_empty() {
            return Err(Error::Empty("ball gradient batch"));
        }
        self.check_map(fm)?;
        for p in batch {
            check_len("ball batch point", fm.dims_in(), p.as_ref().len())?;
        }
        let n = batch.len() as f64;
        let (violators, mut d_center, mut d_log_scale) = reduce_in_order(
            batch,
            || (0usize, vec![0.0; fm.dims_out()], vec![0.0; fm.dims_in()]),
            |acc, x| {
                let x = x.as_ref();
                let phi = fm.map_unchecked(x);
                if self.sq_distance(&phi) - self.radius_sq > 0.0 {
                    acc.0 += 1;
                    // d/dphi ||phi - c||^2 = 2 (phi - c)
                    let cot: Vec<f64> = phi
                        .iter()
                        .zip(&self.center)
                        .map(|(p, c)| 2.0 * (p - c))
                        .collect();
                    for (dc, g) in acc.1.iter_mut().zip(&cot) {
                        *dc -= g;
                    }
                    for (dl, g) in acc.2.iter_mut().zip(fm.vjp_log_scale_unchecked(x, &cot)) {
                        *dl += g;
                    }
                }
            },
            |acc, part| {
                acc.0 += part.0;
                acc.1.iter_mut().zip(&part.1).for_each(|(a, b)| *a += b);
                acc.2.iter_mut().zip(&part.2).for_each(|(a, b)| *a += b);
            },
        );
        d_center.iter_mut().for_each(|g| *g /= n);
        d_log_scale.iter_mut().for_each(|g| *g /= n);
        Ok(BallGradients {
            d_radius_sq: self.lambda - violators as f64 / n,
            d_center,
            d_log_scale,
        })
    }

    /// `r - ||phi(x) - c||^2`: positive inside the learned contour.
    pub fn decision_value(&self, fm: &FeatureMap, x: &[f64]) -> Result<f64> {
        self.check_map(fm)?;
        let phi = fm.map_point(x)?;
        Ok(self.radius_sq - self.sq_distance(&phi))
    }

    /// Applies one Adam step to `(r, c, log_scale)` and projects `r` onto `r >= 0`.
    pub fn apply(
        &mut self,
        fm: &mut FeatureMap,
        grads: &BallGradients,
        opt: &mut BallOptimizer,
        lr: f64,
    ) -> Result<()> {
        let mut r = [self.radius_sq];
        opt.radius_sq.update(&mut r, &[grads.d_radius_sq], lr)?;
        self.radius_sq = r[0].max(0.0);
        opt.center.update(&mut self.center, &grads.d_center, lr)?;
        opt.log_scale
            .update(fm.log_scale_mut(), &grads.d_log_scale, lr)?;
        if fm.scales().iter().any(|s| !s.is_finite() || *s <= 0.0) {
            return Err(Error::NonFinite("kernel scale after update".into()));
        }
        Ok(())
    }
}

pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let w = pos - lo as f64;
    sorted[lo] * (1.0 - w) + sorted[hi] * w
}

/// Settings read by [`fit_ball`] and [`ball_epoch`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BallFitSettings {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BallEpochStats {
    /// `J_d` over the full dataset after the epoch.
    pub objective: f64,
    /// Mean hinge over the full dataset after the epoch.
    pub hinge_mean: f64,
    pub radius_sq: f64,
    pub violator_fraction: f64,
}

/// Shuffled minibatches covering the dataset once.
pub(crate) fn epoch_batches<R: Rng>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size.max(1)).map(|c| c.to_vec()).collect()
}

/// Runs one pass of minibatch Adam over the dataset. `epoch` is only used
/// for diagnostics.
pub fn ball_epoch<R: Rng>(
    ball: &mut Ball,
    fm: &mut FeatureMap,
    data: &Dataset,
    settings: &BallFitSettings,
    opt: &mut BallOptimizer,
    rng: &mut R,
    epoch: usize,
) -> Result<BallEpochStats> {
    for (bi, idx) in epoch_batches(data.len(), settings.batch_size, rng)
        .into_iter()
        .enumerate()
    {
        let batch: Vec<&[f64]> = idx.iter().map(|&i| data.row(i)).collect();
        let loss = ball.objective(fm, &batch)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                batch: bi,
                detail: format!("ball objective is {loss}"),
            });
        }
        let grads = ball.gradients(fm, &batch)?;
        ball.apply(fm, &grads, opt, settings.lr)
            .map_err(|e| Error::Diverged {
                epoch,
                batch: bi,
                detail: e.to_string(),
            })?;
    }
    let stats = ball_stats(ball, fm, data)?;
    if !stats.objective.is_finite() {
        return Err(Error::Diverged {
            epoch,
            batch: 0,
            detail: format!("full-data ball objective is {}", stats.objective),
        });
    }
    Ok(stats)
}

pub fn ball_stats(ball: &Ball, fm: &FeatureMap, data: &Dataset) -> Result<BallEpochStats> {
    let rows = data.rows();
    let phis = fm.map_batch(&rows)?;
    let n = phis.len() as f64;
    let mut hinge = 0.0;
    let mut violators = 0usize;
    for p in &phis {
        let h = ball.hinge_violation(p);
        hinge += h;
        violators += usize::from(h > 0.0);
    }
    Ok(BallEpochStats {
        objective: ball.lambda * ball.radius_sq + hinge / n,
        hinge_mean: hinge / n,
        radius_sq: ball.radius_sq,
        violator_fraction: violators as f64 / n,
    })
}

/// Initializes a ball from the first shuffled minibatch and fits it for
/// `settings.epochs` passes. Returns the ball and the per-epoch statistics.
pub fn fit_ball<R: Rng>(
    fm: &mut FeatureMap,
    data: &Dataset,
    settings: &BallFitSettings,
    opt: &mut BallOptimizer,
    rng: &mut R,
) -> Result<(Ball, Vec<BallEpochStats>)> {
    if data.is_empty() {
        return Err(Error::Empty("ball training data"));
    }
    if settings.epochs == 0 {
        return Err(Error::Config("ball fitting needs at least one epoch".into()));
    }
    let mut ball = initial_ball(fm, data, settings, rng)?;
    let mut log = Vec::with_capacity(settings.epochs);
    for epoch in 1..=settings.epochs {
        log.push(ball_epoch(&mut ball, fm, data, settings, opt, rng, epoch)?);
    }
    Ok((ball, log))
}

pub(crate) fn initial_ball<R: Rng>(
    fm: &FeatureMap,
    data: &Dataset,
    settings: &BallFitSettings,
    rng: &mut R,
) -> Result<Ball> {
    let first = epoch_batches(data.len(), settings.batch_size, rng)
        .into_iter()
        .next()
        .ok_or(Error::Empty("ball training data"))?;
    let batch: Vec<&[f64]> = first.iter().map(|&i| data.row(i)).collect();
    Ball::initialize(fm, &batch, settings.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn unit(dim: usize, k: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        v
    }

    #[test]
    fn hinge_cases() {
        let b = Ball::new(vec![0.0, 0.0], 1.0, 1.0).unwrap();
        assert_eq!(b.hinge_violation(&[0.0, 0.0]), 0.0);
        assert_eq!(b.hinge_violation(&[1.0, 1.0]), 1.0);
        assert_eq!(b.hinge_violation(&[1.0, 0.0]), 0.0);
    }

    #[test]
    fn objective_cases() {
        let fm = FeatureMap::new(1, 4, 0, &[0.0]).unwrap();
        let phi0 = fm.map_point(&[0.0]).unwrap();
        let inside = Ball::new(phi0.clone(), 0.5, 1.0).unwrap();
        let batch = [[0.0], [0.0]];
        assert!((inside.objective(&fm, &batch).unwrap() - 0.5).abs() < 1e-15);

        // a single point at squared distance 1 from the center, r = 0
        let mut c = phi0.clone();
        c[4] += 1.0;
        let b = Ball::new(c, 0.0, 1.0).unwrap();
        assert!((b.objective(&fm, &[[0.0]]).unwrap() - 1.0).abs() < 1e-12);

        let empty: [[f64; 1]; 0] = [];
        assert!(matches!(b.objective(&fm, &empty), Err(Error::Empty(_))));
        assert!(matches!(b.gradients(&fm, &empty), Err(Error::Empty(_))));
    }

    #[test]
    fn no_violators_gradient() {
        let fm = FeatureMap::new(2, 6, 1, &[0.0, 0.0]).unwrap();
        let b = Ball::new(vec![0.0; 12], 4.0, 0.7).unwrap();
        let g = b.gradients(&fm, &[[0.1, 0.2], [0.5, -0.3]]).unwrap();
        assert_eq!(g.d_radius_sq, 0.7);
        assert!(g.d_center.iter().all(|v| *v == 0.0));
        assert!(g.d_log_scale.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn all_violators_gradient() {
        let fm = FeatureMap::new(2, 6, 1, &[0.0, 0.0]).unwrap();
        let b = Ball::new(unit(12, 0).iter().map(|v| v * 3.0).collect(), 0.0, 1.0).unwrap();
        let g = b.gradients(&fm, &[[0.1, 0.2], [0.5, -0.3], [1.0, 1.0]]).unwrap();
        assert!((g.d_radius_sq - 0.0).abs() < 1e-15);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-5;
        let mut checked = 0;
        for trial in 0..30u64 {
            let fm = FeatureMap::new(2, 10, trial, &[0.2, -0.1]).unwrap();
            let batch: Vec<Vec<f64>> = (0..8)
                .map(|_| (0..2).map(|_| StandardNormal.sample(&mut rng)).collect())
                .collect();
            let mut ball = Ball::initialize(&fm, &batch, 0.4).unwrap();
            ball.radius_sq *= 0.8;
            let phis = fm.map_batch(&batch).unwrap();
            // skip configurations within a step of a hinge kink
            if phis
                .iter()
                .any(|p| (ball.sq_distance(p) - ball.radius_sq).abs() < 1e-3)
            {
                continue;
            }
            let g = ball.gradients(&fm, &batch).unwrap();
            let f = |b: &Ball, m: &FeatureMap| b.objective(m, &batch).unwrap();

            let mut bp = ball.clone();
            let mut bm = ball.clone();
            bp.radius_sq += h;
            bm.radius_sq -= h;
            let num = (f(&bp, &fm) - f(&bm, &fm)) / (2.0 * h);
            assert!((num - g.d_radius_sq).abs() <= 1e-4 * num.abs().max(1e-2));

            for k in 0..ball.dims() {
                let mut bp = ball.clone();
                let mut bm = ball.clone();
                bp.center[k] += h;
                bm.center[k] -= h;
                let num = (f(&bp, &fm) - f(&bm, &fm)) / (2.0 * h);
                assert!(
                    (num - g.d_center[k]).abs() <= 1e-4 * num.abs().max(1e-2),
                    "center {k}: {num} vs {}",
                    g.d_center[k]
                );
            }
            for j in 0..2 {
                let mut lp = fm.log_scale().to_vec();
                let mut lm = lp.clone();
                lp[j] += h;
                lm[j] -= h;
                let fp = FeatureMap::from_directions(2, fm.directions().to_vec(), lp).unwrap();
                let fmm = FeatureMap::from_directions(2, fm.directions().to_vec(), lm).unwrap();
                let num = (f(&ball, &fp) - f(&ball, &fmm)) / (2.0 * h);
                assert!(
                    (num - g.d_log_scale[j]).abs() <= 1e-4 * num.abs().max(1e-2),
                    "log-scale {j}: {num} vs {}",
                    g.d_log_scale[j]
                );
            }
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} kink-free configurations");
    }

    #[test]
    fn decision_value_cases() {
        let fm = FeatureMap::new(2, 5, 3, &[0.0, 0.0]).unwrap();
        let x = [0.3, -0.4];
        let phi = fm.map_point(&x).unwrap();
        let b = Ball::new(phi.clone(), 0.25, 1.0).unwrap();
        assert!((b.decision_value(&fm, &x).unwrap() - 0.25).abs() < 1e-15);

        let y = [1.0, 0.7];
        let b2 = Ball::new(phi, 0.0, 1.0).unwrap();
        let on = Ball::new(b2.center.clone(), b2.sq_distance(&fm.map_point(&y).unwrap()), 1.0)
            .unwrap();
        assert!(on.decision_value(&fm, &y).unwrap().abs() < 1e-15);
        assert_eq!(
            on.decision_value(&fm, &y).unwrap(),
            on.decision_value(&fm, &y).unwrap()
        );
    }

    #[test]
    fn single_point_collapses_ball_onto_it() {
        let mut fm = FeatureMap::new(2, 20, 8, &[0.0, 0.0]).unwrap();
        let data = Dataset::from_rows("one", vec![vec![0.4, -0.2]]).unwrap();
        let settings = BallFitSettings {
            lambda: 1.0,
            epochs: 400,
            batch_size: 1,
            lr: 1e-2,
        };
        let mut opt = BallOptimizer::new(&fm);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (ball, _) = fit_ball(&mut fm, &data, &settings, &mut opt, &mut rng).unwrap();
        let phi = fm.map_point(data.row(0)).unwrap();
        assert!(ball.radius_sq < 1e-2, "r = {}", ball.radius_sq);
        assert!(ball.sq_distance(&phi) < 1e-2);
    }

    #[test]
    fn radius_never_negative() {
        let mut fm = FeatureMap::new(1, 10, 8, &[0.0]).unwrap();
        let mut ball = Ball::new(vec![0.0; 20], 1e-6, 1.0).unwrap();
        let mut opt = BallOptimizer::new(&fm);
        let grads = BallGradients {
            d_radius_sq: 1.0,
            d_center: vec![0.0; 20],
            d_log_scale: vec![0.0],
        };
        for _ in 0..10 {
            ball.apply(&mut fm, &grads, &mut opt, 0.1).unwrap();
            assert!(ball.radius_sq >= 0.0);
        }
        assert_eq!(ball.radius_sq, 0.0);
    }

    #[test]
    fn quantile_interpolates() {
        assert_eq!(quantile_sorted(&[1.0], 0.9), 1.0);
        assert!((quantile_sorted(&[0.0, 1.0, 2.0, 3.0, 4.0], 0.9) - 3.6).abs() < 1e-12);
    }
}
