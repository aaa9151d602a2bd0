//! JSON experiment files read by the command-line tool.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{load_mnist_idx, sample_mixture, sample_s_shape, Dataset, MixtureSpec};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Environment variable that overrides `output_dir`.
pub const OUTPUT_DIR_ENV: &str = "GEN_OUTPUT_DIR";

/// Source of the training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    Mixture {
        mixture: MixtureSpec,
        n: usize,
        seed: u64,
    },
    SShape {
        n: usize,
        noise_std: f64,
        seed: u64,
    },
    /// CSV with a header row and one point per line.
    Csv { path: PathBuf },
    Mnist {
        images: PathBuf,
        labels: PathBuf,
        subset: usize,
    },
}

impl DatasetSpec {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSpec::Mixture { mixture, n, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                sample_mixture(mixture, *n, &mut rng)
            }
            DatasetSpec::SShape { n, noise_std, seed } => {
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                sample_s_shape(*n, *noise_std, &mut rng)
            }
            DatasetSpec::Csv { path } => Dataset::read_csv(path),
            DatasetSpec::Mnist {
                images,
                labels,
                subset,
            } => load_mnist_idx(images, labels, *subset),
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match self {
            DatasetSpec::Csv { path } => fix(path),
            DatasetSpec::Mnist { images, labels, .. } => {
                fix(images);
                fix(labels);
            }
            _ => {}
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub train: TrainConfig,
    pub dataset: DatasetSpec,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl ExperimentConfig {
    /// Parses and validates a config. Relative paths are resolved against
    /// `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.train.validate()?;
        cfg.dataset.resolve_paths(base_dir);
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base_dir.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    /// Reads a config file; `GEN_OUTPUT_DIR` replaces `output_dir` when set.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut cfg = Self::parse(&text, base).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let Some(dir) = std::env::var_os(OUTPUT_DIR_ENV) {
            cfg.output_dir = PathBuf::from(dir);
        }
        Ok(cfg)
    }
}

fn default_eval_samples() -> usize {
    10_000
}
fn default_mode_radius() -> f64 {
    0.15
}

/// Ground truth for `gen eval`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TruthSpec {
    pub mixture: MixtureSpec,
    #[serde(default = "default_eval_samples")]
    pub samples: usize,
    #[serde(default = "default_mode_radius")]
    pub mode_radius: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TruthSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let spec: TruthSpec =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        spec.mixture.validate()?;
        if spec.samples == 0 || !(spec.mode_radius > 0.0) {
            return Err(Error::Config("truth spec needs samples >= 1 and mode_radius > 0".into()));
        }
        Ok(spec)
    }
}
