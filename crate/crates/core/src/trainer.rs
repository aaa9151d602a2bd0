//! Two-phase training: fit the enclosing ball (and kernel scale), then
//! freeze both and train the generator to land inside the ball.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::ball::{ball_epoch, epoch_batches, initial_ball, Ball, BallFitSettings, BallOptimizer};
use crate::checkpoint::{Checkpoint, FORMAT_VERSION};
use crate::data::{diameter_estimate, rescale_to_bijective, Dataset};
use crate::error::{check_len, Error, Result};
use crate::generator::{mlp_layers, Activation, Generator, NoiseKind, NoiseSpec, Tape};
use crate::reduce_in_order;
use crate::rff::FeatureMap;

fn default_lambda() -> f64 {
    1.0
}
fn default_fm_weight() -> f64 {
    1.0
}
fn default_lr_ball() -> f64 {
    1e-3
}
fn default_lr_gen() -> f64 {
    1e-4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorArch {
    pub hidden: Vec<usize>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
}

/// Hyperparameters of a training run. Every field is echoed into the
/// checkpoint after [`TrainConfig::resolved`] fills defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    pub num_features: usize,
    pub total_epochs: usize,
    /// Ball-fitting epochs; `None` means `ceil(total_epochs / 2)`.
    #[serde(default)]
    pub phase1_epochs: Option<usize>,
    pub batch_size: usize,
    #[serde(default = "default_lr_ball")]
    pub lr_ball: f64,
    #[serde(default = "default_lr_gen")]
    pub lr_gen: f64,
    #[serde(default = "default_fm_weight")]
    pub fm_weight: f64,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub generator: GeneratorArch,
    /// Initial value of every log-scale coordinate (0 gives `Sigma = I`).
    #[serde(default)]
    pub initial_log_scale: f64,
    /// Shrink the data so the bijectivity contraction condition holds.
    #[serde(default)]
    pub rescale_to_bijective: bool,
}

impl TrainConfig {
    /// Config with the documented defaults, for programmatic use.
    pub fn new(num_features: usize, total_epochs: usize, batch_size: usize, noise: NoiseSpec, generator: GeneratorArch) -> Self {
        Self {
            lambda: default_lambda(),
            num_features,
            total_epochs,
            phase1_epochs: None,
            batch_size,
            lr_ball: default_lr_ball(),
            lr_gen: default_lr_gen(),
            fm_weight: default_fm_weight(),
            seed: 0,
            noise,
            generator,
            initial_log_scale: 0.0,
            rescale_to_bijective: false,
        }
    }

    /// Setting of the one-dimensional mixture benchmark: `z ~ U(-1, 1)`, two
    /// hidden layers of 30 softplus units, `D = 100`.
    pub fn bench_1d() -> Self {
        Self::new(
            100,
            40,
            64,
            NoiseSpec {
                kind: NoiseKind::Uniform,
                dim: 1,
            },
            GeneratorArch {
                hidden: vec![30, 30],
                hidden_activation: Activation::Softplus,
                output_activation: Activation::Identity,
            },
        )
    }

    pub fn phase1(&self) -> usize {
        self.phase1_epochs.unwrap_or(self.total_epochs.div_ceil(2))
    }

    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.phase1_epochs = Some(self.phase1());
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let l = self.phase1();
        if !(self.lambda > 0.0) || !self.lambda.is_finite() {
            return bad(format!("lambda must be > 0, got {}", self.lambda));
        }
        if self.num_features == 0 {
            return bad("num_features must be >= 1".into());
        }
        if !(1 <= l && l < self.total_epochs) {
            return bad(format!(
                "need 1 <= phase1_epochs < total_epochs, got {l} and {}",
                self.total_epochs
            ));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if !(self.lr_ball > 0.0 && self.lr_gen > 0.0) {
            return bad("learning rates must be > 0".into());
        }
        if !(self.fm_weight >= 0.0) || !self.fm_weight.is_finite() {
            return bad(format!("fm_weight must be >= 0, got {}", self.fm_weight));
        }
        if self.noise.dim == 0 {
            return bad("noise dimension must be >= 1".into());
        }
        if !self.initial_log_scale.exp().is_finite() || self.initial_log_scale.exp() == 0.0 {
            return bad("initial_log_scale out of range".into());
        }
        Ok(())
    }

    fn ball_settings(&self) -> BallFitSettings {
        BallFitSettings {
            lambda: self.lambda,
            epochs: self.phase1(),
            batch_size: self.batch_size,
            lr: self.lr_ball,
        }
    }

    pub fn generator_layers(&self, out_dim: usize) -> Vec<crate::generator::LayerSpec> {
        mlp_layers(
            self.noise.dim,
            &self.generator.hidden,
            self.generator.hidden_activation,
            out_dim,
            self.generator.output_activation,
        )
    }
}

/// Independent seeds for the feature directions, generator weights and the
/// training stream, all derived from the run seed.
pub fn derived_seed(seed: u64, purpose: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(purpose);
    rng.random()
}

const SEED_FEATURES: u64 = 1;

/// Feature map a run with this config starts from.
pub fn initial_feature_map(config: &TrainConfig, dims: usize) -> Result<FeatureMap> {
    FeatureMap::new(
        dims,
        config.num_features,
        derived_seed(config.seed, SEED_FEATURES),
        &vec![config.initial_log_scale; dims],
    )
}
const SEED_GENERATOR: u64 = 2;
const STREAM_TRAINING: u64 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Ball,
    Generator,
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: Phase,
    /// `J_d` on the full dataset (ball phase) or the mean minibatch
    /// generator objective (generator phase).
    pub objective: f64,
    pub hinge_mean: f64,
    /// Mean minibatch squared feature-mean gap; generator phase only.
    pub fm_gap: Option<f64>,
    pub radius_sq: f64,
    pub violator_fraction: Option<f64>,
    pub wall_ms: u64,
}

/// Value and parameter gradient of the generator objective on one minibatch.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorLoss {
    /// `hinge + fm_weight * fm_term`.
    pub total: f64,
    pub hinge: f64,
    /// `||mean phi(x) - mean phi(G(z))||^2`.
    pub fm_term: f64,
    pub grads: Vec<f64>,
}

fn mean_features(fm: &FeatureMap, phis: &[Vec<f64>]) -> Vec<f64> {
    let mut m = vec![0.0; fm.dims_out()];
    for p in phis {
        m.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    let n = phis.len() as f64;
    m.iter_mut().for_each(|a| *a /= n);
    m
}

/// Mean hinge of `G(z)` against the frozen ball plus `fm_weight` times the
/// squared distance between the minibatch feature means of data and samples.
/// Gradients flow only into the generator parameters.
pub fn generator_loss<Z, X>(
    fm: &FeatureMap,
    ball: &Ball,
    generator: &Generator,
    z_batch: &[Z],
    x_batch: &[X],
    fm_weight: f64,
) -> Result<GeneratorLoss>
where
    Z: AsRef<[f64]> + Sync,
    X: AsRef<[f64]> + Sync,
{
    if z_batch.is_empty() || x_batch.is_empty() {
        return Err(Error::Empty("generator loss batch"));
    }
    check_len("generator output", fm.dims_in(), generator.out_dim())?;
    check_len("ball center", fm.dims_out(), ball.dims())?;

    let forward: Vec<(Vec<f64>, Tape)> = {
        use rayon::prelude::*;
        z_batch
            .par_iter()
            .map(|z| generator.forward(z.as_ref()))
            .collect::<Result<_>>()?
    };
    let outputs: Vec<&[f64]> = forward.iter().map(|(y, _)| y.as_slice()).collect();
    let phis = fm.map_batch(&outputs)?;
    let data_mean = mean_features(fm, &fm.map_batch(x_batch)?);
    let gen_mean = mean_features(fm, &phis);

    let b = z_batch.len() as f64;
    let gap: Vec<f64> = gen_mean.iter().zip(&data_mean).map(|(g, d)| g - d).collect();
    let fm_term: f64 = gap.iter().map(|v| v * v).sum();
    // d(fm_weight * ||m_g - m_x||^2)/d phi_k, identical for every sample
    let fm_cot: Vec<f64> = gap.iter().map(|v| fm_weight * 2.0 * v / b).collect();

    let items: Vec<usize> = (0..forward.len()).collect();
    let (hinge_sum, grads) = reduce_in_order(
        &items,
        || (0.0, vec![0.0; generator.num_params()]),
        |acc, &k| {
            let (y, tape) = &forward[k];
            let phi = &phis[k];
            let violation = ball.sq_distance(phi) - ball.radius_sq;
            let mut cot = fm_cot.clone();
            if violation > 0.0 {
                acc.0 += violation;
                for ((c, p), center) in cot.iter_mut().zip(phi).zip(&ball.center) {
                    *c += 2.0 * (p - center) / b;
                }
            }
            let d_out = fm.vjp_input_unchecked(y, &cot);
            generator
                .backward_into(tape, &d_out, &mut acc.1)
                .expect("tape produced by this generator");
        },
        |acc, part| {
            acc.0 += part.0;
            acc.1.iter_mut().zip(&part.1).for_each(|(a, p)| *a += p);
        },
    );
    let hinge = hinge_sum / b;
    Ok(GeneratorLoss {
        total: hinge + fm_weight * fm_term,
        hinge,
        fm_term,
        grads,
    })
}

/// Training state that advances one epoch at a time.
#[derive(Debug, Clone)]
pub struct Trainer {
    ckpt: Checkpoint,
    data: Dataset,
}

impl Trainer {
    /// Builds the feature map, optionally rescales the data, initializes the
    /// ball from the first minibatch and draws the generator weights.
    pub fn new(data: &Dataset, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        let config = config.resolved();
        let d = data.dims();
        let fm = initial_feature_map(&config, d)?;
        let data = if config.rescale_to_bijective {
            rescale_to_bijective(data, &fm)?
        } else {
            data.clone()
        };
        let generator = Generator::new(
            &config.generator_layers(d),
            derived_seed(config.seed, SEED_GENERATOR),
        )?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_TRAINING);
        let ball = initial_ball(&fm, &data, &config.ball_settings(), &mut rng)?;
        let ckpt = Checkpoint {
            format_version: FORMAT_VERSION,
            dataset: None,
            epochs_completed: 0,
            data_diameter: diameter_estimate(&data),
            ball_optimizer: BallOptimizer::new(&fm),
            generator_optimizer: AdamState::new(generator.num_params()),
            feature_map: fm,
            ball,
            generator,
            rng_state: rng,
            scale_applied: data.scale_applied.clone(),
            config,
        };
        Ok(Self { ckpt, data })
    }

    /// Continues a run from a checkpoint. `raw_data` is the unscaled dataset
    /// the run was started with.
    pub fn resume(ckpt: Checkpoint, raw_data: &Dataset) -> Result<Self> {
        ckpt.validate()?;
        check_len("dataset dimension", ckpt.feature_map.dims_in(), raw_data.dims())?;
        let data = match &ckpt.scale_applied {
            Some(scale) if raw_data.scale_applied.is_none() => {
                let rows = raw_data.rows().into_iter().map(|r| scale.apply(r)).collect();
                let mut ds = Dataset::from_rows(raw_data.name.clone(), rows)?;
                ds.scale_applied = Some(scale.clone());
                ds
            }
            _ => raw_data.clone(),
        };
        Ok(Self { ckpt, data })
    }

    pub fn checkpoint(&self) -> &Checkpoint {
        &self.ckpt
    }

    pub fn checkpoint_mut(&mut self) -> &mut Checkpoint {
        &mut self.ckpt
    }

    pub fn into_checkpoint(self) -> Checkpoint {
        self.ckpt
    }

    /// Training data as seen by the model (after any rescaling).
    pub fn data(&self) -> &Dataset {
        &self.data
    }

    pub fn is_done(&self) -> bool {
        self.ckpt.epochs_completed >= self.ckpt.config.total_epochs
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        if self.is_done() {
            return Err(Error::Config("training already finished".into()));
        }
        let start = Instant::now();
        let epoch = self.ckpt.epochs_completed + 1;
        let mut rec = if epoch <= self.ckpt.config.phase1() {
            self.ball_phase_epoch(epoch)?
        } else {
            self.generator_phase_epoch(epoch)?
        };
        rec.wall_ms = start.elapsed().as_millis() as u64;
        self.ckpt.epochs_completed = epoch;
        Ok(rec)
    }

    fn ball_phase_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let c = &mut self.ckpt;
        let settings = c.config.ball_settings();
        let stats = ball_epoch(
            &mut c.ball,
            &mut c.feature_map,
            &self.data,
            &settings,
            &mut c.ball_optimizer,
            &mut c.rng_state,
            epoch,
        )?;
        Ok(EpochRecord {
            epoch,
            phase: Phase::Ball,
            objective: stats.objective,
            hinge_mean: stats.hinge_mean,
            fm_gap: None,
            radius_sq: stats.radius_sq,
            violator_fraction: Some(stats.violator_fraction),
            wall_ms: 0,
        })
    }

    fn generator_phase_epoch(&mut self, epoch: usize) -> Result<EpochRecord> {
        let c = &mut self.ckpt;
        let batches = epoch_batches(self.data.len(), c.config.batch_size, &mut c.rng_state);
        let (mut obj, mut hinge, mut fm_term) = (0.0, 0.0, 0.0);
        let nb = batches.len() as f64;
        for (bi, idx) in batches.iter().enumerate() {
            let x_batch: Vec<&[f64]> = idx.iter().map(|&i| self.data.row(i)).collect();
            let z_batch = c.config.noise.sample(idx.len(), &mut c.rng_state)?;
            let diverged = |detail: String| Error::Diverged {
                epoch,
                batch: bi,
                detail,
            };
            let loss = generator_loss(
                &c.feature_map,
                &c.ball,
                &c.generator,
                &z_batch,
                &x_batch,
                c.config.fm_weight,
            )
            .map_err(|e| diverged(e.to_string()))?;
            if !loss.total.is_finite() {
                return Err(diverged(format!("generator objective is {}", loss.total)));
            }
            c.generator_optimizer
                .update(c.generator.params_mut(), &loss.grads, c.config.lr_gen)
                .map_err(|e| diverged(e.to_string()))?;
            obj += loss.total;
            hinge += loss.hinge;
            fm_term += loss.fm_term;
        }
        Ok(EpochRecord {
            epoch,
            phase: Phase::Generator,
            objective: obj / nb,
            hinge_mean: hinge / nb,
            fm_gap: Some(fm_term / nb),
            radius_sq: c.ball.radius_sq,
            violator_fraction: None,
            wall_ms: 0,
        })
    }
}

/// Runs every epoch and returns the final checkpoint with the epoch log.
pub fn train(data: &Dataset, config: &TrainConfig) -> Result<(Checkpoint, Vec<EpochRecord>)> {
    let mut trainer = Trainer::new(data, config)?;
    let mut log = Vec::with_capacity(config.total_epochs);
    while !trainer.is_done() {
        log.push(trainer.run_epoch()?);
    }
    Ok((trainer.into_checkpoint(), log))
}

/// Draws `n` samples from the trained generator, in the training (possibly
/// rescaled) coordinates.
pub fn generate_scaled<R: Rng>(ckpt: &Checkpoint, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let zs = ckpt.config.noise.sample(n, rng)?;
    zs.iter().map(|z| ckpt.generator.output(z)).collect()
}

/// Draws `n` samples in raw data coordinates.
pub fn generate<R: Rng>(ckpt: &Checkpoint, n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    let ys = generate_scaled(ckpt, n, rng)?;
    Ok(match &ckpt.scale_applied {
        Some(s) => ys.iter().map(|y| s.invert(y)).collect(),
        None => ys,
    })
}

/// Mean hinge violation of `G(z)` over the given noise vectors.
pub fn mean_hinge<Z: AsRef<[f64]>>(ckpt: &Checkpoint, generator: &Generator, zs: &[Z]) -> Result<f64> {
    let mut total = 0.0;
    for z in zs {
        let phi = ckpt.feature_map.map_point(&generator.output(z.as_ref())?)?;
        total += ckpt.ball.hinge_violation(&phi);
    }
    Ok(total / zs.len() as f64)
}

/// `||mean phi(a) - mean phi(b)||`.
pub fn feature_mean_gap<A, B>(fm: &FeatureMap, a: &[A], b: &[B]) -> Result<f64>
where
    A: AsRef<[f64]> + Sync,
    B: AsRef<[f64]> + Sync,
{
    let ma = mean_features(fm, &fm.map_batch(a)?);
    let mb = mean_features(fm, &fm.map_batch(b)?);
    Ok(ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{sample_mixture, MixtureSpec};
    use crate::generator::LayerSpec;

    fn small_config() -> TrainConfig {
        let mut cfg = TrainConfig::bench_1d();
        cfg.num_features = 20;
        cfg.total_epochs = 4;
        cfg.batch_size = 16;
        cfg.generator.hidden = vec![6];
        cfg.lr_gen = 1e-3;
        cfg
    }

    fn small_data(n: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        sample_mixture(&MixtureSpec::bench_1d(), n, &mut rng).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut cfg = small_config();
        cfg.validate().unwrap();
        assert_eq!(cfg.phase1(), 2);
        cfg.total_epochs = 5;
        assert_eq!(cfg.phase1(), 3);
        cfg.phase1_epochs = Some(5);
        assert!(cfg.validate().is_err());
        cfg.phase1_epochs = Some(0);
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.lr_gen = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = small_config();
        cfg.lambda = -1.0;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn zero_loss_at_joint_minimum() {
        let fm = FeatureMap::new(2, 12, 3, &[0.0, 0.0]).unwrap();
        let y0 = [0.3, -0.2];
        // zero weights: every z maps to the bias
        let layers = [LayerSpec::new(2, 2, Activation::Identity)];
        let g = Generator::from_params(&layers, vec![0.0, 0.0, 0.0, 0.0, y0[0], y0[1]]).unwrap();
        let ball = Ball::new(fm.map_point(&y0).unwrap(), 0.1, 1.0).unwrap();
        let zs = vec![vec![0.5, -0.5], vec![0.1, 0.9]];
        let loss = generator_loss(&fm, &ball, &g, &zs, &[y0], 1.0).unwrap();
        assert!(loss.total.abs() < 1e-15);
        assert!(loss.grads.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn zero_feature_weight_is_pure_hinge() {
        let fm = FeatureMap::new(1, 10, 3, &[0.0]).unwrap();
        let g = Generator::new(&small_config().generator_layers(1), 1).unwrap();
        let ball = Ball::new(fm.map_point(&[2.0]).unwrap(), 0.05, 1.0).unwrap();
        let zs = vec![vec![0.2], vec![-0.7], vec![0.9]];
        let xs = vec![vec![0.0], vec![0.1]];
        let l0 = generator_loss(&fm, &ball, &g, &zs, &xs, 0.0).unwrap();
        assert_eq!(l0.total, l0.hinge);
        let mean_h = mean_hinge_direct(&fm, &ball, &g, &zs);
        assert!((l0.hinge - mean_h).abs() < 1e-14);
        let l1 = generator_loss(&fm, &ball, &g, &zs, &xs, 2.0).unwrap();
        assert!((l1.total - (l1.hinge + 2.0 * l1.fm_term)).abs() < 1e-14);
    }

    fn mean_hinge_direct(fm: &FeatureMap, ball: &Ball, g: &Generator, zs: &[Vec<f64>]) -> f64 {
        zs.iter()
            .map(|z| ball.hinge_violation(&fm.map_point(&g.output(z).unwrap()).unwrap()))
            .sum::<f64>()
            / zs.len() as f64
    }

    #[test]
    fn generator_loss_matches_central_differences() {
        let mut checked = 0;
        for trial in 0..12u64 {
            let fm = FeatureMap::new(2, 8, trial, &[0.1, -0.2]).unwrap();
            let layers = mlp_layers(2, &[5], Activation::Softplus, 2, Activation::Identity);
            let g = Generator::new(&layers, trial + 100).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(trial);
            let spec = NoiseSpec {
                kind: NoiseKind::Normal,
                dim: 2,
            };
            let zs = spec.sample(6, &mut rng).unwrap();
            let xs = spec.sample(5, &mut rng).unwrap();
            let ball = Ball::initialize(&fm, &xs, 1.0).unwrap();
            let phis: Vec<Vec<f64>> = zs
                .iter()
                .map(|z| fm.map_point(&g.output(z).unwrap()).unwrap())
                .collect();
            if phis
                .iter()
                .any(|p| (ball.sq_distance(p) - ball.radius_sq).abs() < 1e-3)
            {
                continue;
            }
            let loss = generator_loss(&fm, &ball, &g, &zs, &xs, 0.7).unwrap();
            let f = |p: &[f64]| {
                let gg = Generator::from_params(g.layers(), p.to_vec()).unwrap();
                generator_loss(&fm, &ball, &gg, &zs, &xs, 0.7).unwrap().total
            };
            let h = 1e-5;
            let scale = loss.grads.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-3);
            for i in 0..g.num_params() {
                let mut pp = g.params().to_vec();
                let mut pm = pp.clone();
                pp[i] += h;
                pm[i] -= h;
                let num = (f(&pp) - f(&pm)) / (2.0 * h);
                assert!(
                    (num - loss.grads[i]).abs() <= 1e-4 * scale,
                    "trial {trial} param {i}: {num} vs {}",
                    loss.grads[i]
                );
            }
            checked += 1;
        }
        assert!(checked >= 5);
    }

    #[test]
    fn empty_batches_rejected() {
        let fm = FeatureMap::new(1, 4, 0, &[0.0]).unwrap();
        let g = Generator::new(&small_config().generator_layers(1), 0).unwrap();
        let ball = Ball::new(vec![0.0; 8], 0.1, 1.0).unwrap();
        let none: Vec<Vec<f64>> = vec![];
        assert!(generator_loss(&fm, &ball, &g, &none, &[vec![0.0]], 1.0).is_err());
        assert!(generator_loss(&fm, &ball, &g, &[vec![0.0]], &none, 1.0).is_err());
    }

    #[test]
    fn one_generator_epoch_logged_once() {
        let mut cfg = small_config();
        cfg.total_epochs = 3;
        cfg.phase1_epochs = Some(2);
        let (_, log) = train(&small_data(64), &cfg).unwrap();
        assert_eq!(log.len(), 3);
        assert_eq!(log.iter().filter(|r| r.phase == Phase::Generator).count(), 1);
        assert!(log[..2].iter().all(|r| r.phase == Phase::Ball && r.fm_gap.is_none()));
        assert!(log[2].fm_gap.is_some());
    }

    #[test]
    fn ball_frozen_during_generator_phase() {
        let cfg = small_config();
        let mut t = Trainer::new(&small_data(64), &cfg).unwrap();
        for _ in 0..cfg.phase1() {
            t.run_epoch().unwrap();
        }
        let ball = t.checkpoint().ball.clone();
        let fm = t.checkpoint().feature_map.clone();
        let g0 = t.checkpoint().generator.clone();
        while !t.is_done() {
            t.run_epoch().unwrap();
        }
        assert_eq!(t.checkpoint().ball, ball);
        assert_eq!(t.checkpoint().feature_map, fm);
        assert_ne!(t.checkpoint().generator, g0);
        assert!(t.run_epoch().is_err());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_config();
        let data = small_data(80);
        let (a, _) = train(&data, &cfg).unwrap();
        let (b, _) = train(&data, &cfg).unwrap();
        assert_eq!(a.to_bytes().unwrap(), b.to_bytes().unwrap());
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let cfg = small_config();
        let data = small_data(80);
        let (full, _) = train(&data, &cfg).unwrap();
        let mut t = Trainer::new(&data, &cfg).unwrap();
        t.run_epoch().unwrap();
        t.run_epoch().unwrap();
        t.run_epoch().unwrap();
        let bytes = t.checkpoint().to_bytes().unwrap();
        let mut resumed = Trainer::resume(Checkpoint::from_bytes(&bytes).unwrap(), &data).unwrap();
        while !resumed.is_done() {
            resumed.run_epoch().unwrap();
        }
        assert_eq!(
            resumed.into_checkpoint().to_bytes().unwrap(),
            full.to_bytes().unwrap()
        );
    }

    #[test]
    fn generate_shapes() {
        let (ckpt, _) = train(&small_data(40), &small_config()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(generate(&ckpt, 0, &mut rng).is_err());
        let xs = generate(&ckpt, 7, &mut rng).unwrap();
        assert_eq!(xs.len(), 7);
        assert!(xs.iter().all(|x| x.len() == 1));
    }

    #[test]
    fn rescaled_run_maps_samples_back() {
        let mut cfg = small_config();
        cfg.rescale_to_bijective = true;
        cfg.initial_log_scale = 2.0;
        let (ckpt, _) = train(&small_data(40), &cfg).unwrap();
        let s = ckpt.scale_applied.as_ref().expect("product exceeds 2 pi");
        assert!(s.factor[0] < 1.0);
        let rep = ckpt.feature_map.check_bijection(ckpt.data_diameter.value);
        assert!(rep.contraction_ok || !rep.rank_ok);
    }
}
