//! Reparameterized random Fourier features.
//!
//! A [`FeatureMap`] holds frozen standard-normal directions `e_i` and a
//! learnable diagonal kernel scale `L = diag(exp(log_scale))`. A point `x`
//! maps to
//!
//! ```text
//! phi(x) = D^{-1/2} [cos(e_i^T L x)]_{i=1..D} ++ D^{-1/2} [sin(e_i^T L x)]_{i=1..D}
//! ```
//!
//! which lies on the unit sphere of `R^{2D}`, and whose inner products
//! approximate the Gaussian kernel `exp(-1/2 u^T L^2 u)`.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{check_finite, check_len, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    dims_in: usize,
    num_features: usize,
    seed: u64,
    /// Row-major `num_features x dims_in`.
    directions: Vec<f64>,
    log_scale: Vec<f64>,
}

/// Outcome of the bijectivity predicate on a feature map and a data diameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BijectionReport {
    pub rank_ok: bool,
    pub contraction_ok: bool,
    /// `||L||_F * diameter * max_i ||e_i||`, compared against `2 pi`.
    pub product_value: f64,
    pub rank: usize,
}

/// Relative singular-value cutoff used for the numerical rank of the directions.
pub const RANK_TOLERANCE: f64 = 1e-10;

impl FeatureMap {
    /// Draws `num_features` directions i.i.d. from `N(0, I_d)` using a generator
    /// seeded by `seed`.
    pub fn new(
        dims_in: usize,
        num_features: usize,
        seed: u64,
        initial_log_scale: &[f64],
    ) -> Result<Self> {
        if dims_in == 0 || num_features == 0 {
            return Err(Error::Config(
                "feature map needs dims_in >= 1 and num_features >= 1".into(),
            ));
        }
        check_len("initial log-scale", dims_in, initial_log_scale.len())?;
        check_finite("initial log-scale", initial_log_scale)?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let directions = (0..num_features * dims_in)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        let fm = Self {
            dims_in,
            num_features,
            seed,
            directions,
            log_scale: initial_log_scale.to_vec(),
        };
        fm.assert_scale_finite()?;
        Ok(fm)
    }

    /// Builds a map from explicit directions (row-major, `num_features x dims_in`).
    pub fn from_directions(
        dims_in: usize,
        directions: Vec<f64>,
        log_scale: Vec<f64>,
    ) -> Result<Self> {
        if dims_in == 0 || directions.is_empty() || !directions.len().is_multiple_of(dims_in) {
            return Err(Error::Config(format!(
                "{} direction entries do not form rows of length {dims_in}",
                directions.len()
            )));
        }
        check_len("log-scale", dims_in, log_scale.len())?;
        check_finite("directions", &directions)?;
        let fm = Self {
            dims_in,
            num_features: directions.len() / dims_in,
            seed: 0,
            directions,
            log_scale,
        };
        fm.assert_scale_finite()?;
        Ok(fm)
    }

    fn assert_scale_finite(&self) -> Result<()> {
        if self.log_scale.iter().all(|l| l.exp().is_finite() && l.exp() > 0.0) {
            Ok(())
        } else {
            Err(Error::NonFinite("kernel scale exp(log_scale)".into()))
        }
    }

    pub fn dims_in(&self) -> usize {
        self.dims_in
    }

    pub fn num_features(&self) -> usize {
        self.num_features
    }

    /// Length of a mapped point, `2 * num_features`.
    pub fn dims_out(&self) -> usize {
        2 * self.num_features
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn directions(&self) -> &[f64] {
        &self.directions
    }

    pub fn direction(&self, i: usize) -> &[f64] {
        &self.directions[i * self.dims_in..(i + 1) * self.dims_in]
    }

    pub fn log_scale(&self) -> &[f64] {
        &self.log_scale
    }

    /// Only the log-scale is trainable; the directions stay frozen.
    pub fn log_scale_mut(&mut self) -> &mut [f64] {
        &mut self.log_scale
    }

    /// Diagonal of `L = Sigma^{1/2}`.
    pub fn scales(&self) -> Vec<f64> {
        self.log_scale.iter().map(|l| l.exp()).collect()
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        check_len("feature map input", self.dims_in, x.len())?;
        check_finite("feature map input", x)
    }

    /// `a_i = e_i^T L x` for every direction.
    fn projections(&self, scaled_x: &[f64]) -> Vec<f64> {
        self.directions
            .chunks_exact(self.dims_in)
            .map(|e| e.iter().zip(scaled_x).map(|(a, b)| a * b).sum())
            .collect()
    }

    fn scaled(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.log_scale)
            .map(|(v, l)| v * l.exp())
            .collect()
    }

    pub fn map_point(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.map_unchecked(x))
    }

    pub(crate) fn map_unchecked(&self, x: &[f64]) -> Vec<f64> {
        let norm = (self.num_features as f64).sqrt().recip();
        let proj = self.projections(&self.scaled(x));
        let mut out = Vec::with_capacity(2 * self.num_features);
        out.extend(proj.iter().map(|a| norm * a.cos()));
        out.extend(proj.iter().map(|a| norm * a.sin()));
        out
    }

    /// Maps every point; order of the output follows the input.
    pub fn map_batch<P: AsRef<[f64]> + Sync>(&self, points: &[P]) -> Result<Vec<Vec<f64>>> {
        for p in points {
            self.check_input(p.as_ref())?;
        }
        Ok(points
            .par_iter()
            .map(|p| self.map_unchecked(p.as_ref()))
            .collect())
    }

    /// `phi(x) . phi(x2)`, approximating `exp(-1/2 (x - x2)^T Sigma (x - x2))`.
    pub fn approx_kernel(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        let a = self.map_point(x)?;
        let b = self.map_point(x2)?;
        Ok(dot(&a, &b))
    }

    /// Closed-form Gaussian kernel for the current scale.
    pub fn exact_kernel(&self, x: &[f64], x2: &[f64]) -> Result<f64> {
        check_len("kernel input", self.dims_in, x.len())?;
        check_len("kernel input", self.dims_in, x2.len())?;
        let q: f64 = x
            .iter()
            .zip(x2)
            .zip(&self.log_scale)
            .map(|((a, b), l)| {
                let u = (a - b) * l.exp();
                u * u
            })
            .sum();
        Ok((-0.5 * q).exp())
    }

    /// Jacobian `d phi / d x`, shape `2D x d`.
    pub fn jacobian_input(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_input(x)?;
        let d = self.dims_in;
        let nf = self.num_features;
        let norm = (nf as f64).sqrt().recip();
        let scales = self.scales();
        let proj = self.projections(&self.scaled(x));
        let mut jac = DMatrix::zeros(2 * nf, d);
        for (i, a) in proj.iter().enumerate() {
            let (s, c) = a.sin_cos();
            for (j, (e, sc)) in self.direction(i).iter().zip(&scales).enumerate() {
                let row = e * sc;
                jac[(i, j)] = -norm * s * row;
                jac[(nf + i, j)] = norm * c * row;
            }
        }
        Ok(jac)
    }

    /// Jacobian `d phi / d log_scale`, shape `2D x d`.
    pub fn jacobian_log_scale(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        let mut jac = self.jacobian_input(x)?;
        for (j, xj) in x.iter().enumerate() {
            jac.column_mut(j).scale_mut(*xj);
        }
        Ok(jac)
    }

    /// Per-direction weights `g_i = (-sin a_i v_i + cos a_i v_{D+i}) / sqrt(D)`
    /// shared by both vector-Jacobian products.
    fn pullback_weights(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let nf = self.num_features;
        let norm = (nf as f64).sqrt().recip();
        let proj = self.projections(&self.scaled(x));
        proj.iter()
            .enumerate()
            .map(|(i, a)| {
                let (s, c) = a.sin_cos();
                norm * (c * v[nf + i] - s * v[i])
            })
            .collect()
    }

    /// `(d phi / d x)^T v` without materializing the Jacobian.
    pub fn vjp_input(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        check_len("cotangent", self.dims_out(), v.len())?;
        Ok(self.vjp_input_unchecked(x, v))
    }

    pub(crate) fn vjp_input_unchecked(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let g = self.pullback_weights(x, v);
        let mut out = vec![0.0; self.dims_in];
        for (gi, e) in g.iter().zip(self.directions.chunks_exact(self.dims_in)) {
            if *gi == 0.0 {
                continue;
            }
            for (o, ej) in out.iter_mut().zip(e) {
                *o += gi * ej;
            }
        }
        for (o, l) in out.iter_mut().zip(&self.log_scale) {
            *o *= l.exp();
        }
        out
    }

    /// `(d phi / d log_scale)^T v`.
    pub fn vjp_log_scale(&self, x: &[f64], v: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        check_len("cotangent", self.dims_out(), v.len())?;
        Ok(self.vjp_log_scale_unchecked(x, v))
    }

    pub(crate) fn vjp_log_scale_unchecked(&self, x: &[f64], v: &[f64]) -> Vec<f64> {
        let mut out = self.vjp_input_unchecked(x, v);
        for (o, xj) in out.iter_mut().zip(x) {
            *o *= xj;
        }
        out
    }

    /// Checks the sufficient conditions under which the map is injective on a
    /// set of the given diameter: full column rank of the directions, and
    /// `||L||_F * diameter * max_i ||e_i|| < 2 pi`. `Sigma` is positive definite
    /// by construction.
    pub fn check_bijection(&self, data_diameter: f64) -> BijectionReport {
        let e = DMatrix::from_row_slice(self.num_features, self.dims_in, &self.directions);
        let sv = e.singular_values();
        let sigma_max = sv.iter().cloned().fold(0.0, f64::max);
        let rank = sv
            .iter()
            .filter(|s| **s > RANK_TOLERANCE * sigma_max && sigma_max > 0.0)
            .count();
        let frob = self
            .log_scale
            .iter()
            .map(|l| (2.0 * l).exp())
            .sum::<f64>()
            .sqrt();
        let max_dir = self
            .directions
            .chunks_exact(self.dims_in)
            .map(|e| e.iter().map(|v| v * v).sum::<f64>().sqrt())
            .fold(0.0, f64::max);
        let product_value = frob * data_diameter * max_dir;
        BijectionReport {
            rank_ok: rank == self.dims_in,
            contraction_ok: product_value < std::f64::consts::TAU,
            product_value,
            rank,
        }
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}
