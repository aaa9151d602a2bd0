//! Versioned JSON snapshot of a training run.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adam::AdamState;
use crate::ball::{Ball, BallOptimizer};
use crate::config::DatasetSpec;
use crate::data::{AffineScale, DiameterEstimate};
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::rff::FeatureMap;
use crate::trainer::TrainConfig;

pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to sample from a model or resume its training
/// bit-for-bit. Floats are written in shortest round-trip form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: TrainConfig,
    /// Where the training data came from, when known.
    pub dataset: Option<DatasetSpec>,
    pub epochs_completed: usize,
    /// Diameter of the (scaled) training data.
    pub data_diameter: DiameterEstimate,
    pub feature_map: FeatureMap,
    pub ball: Ball,
    pub generator: Generator,
    pub ball_optimizer: BallOptimizer,
    pub generator_optimizer: AdamState,
    pub rng_state: ChaCha8Rng,
    /// Affine map from raw to training coordinates.
    pub scale_applied: Option<AffineScale>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec_pretty(self).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        out.push(b'\n');
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_slice(bytes).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        let found = value
            .get("format_version")
            .and_then(serde_json::Value::as_u64)
            .ok_or_else(|| Error::CorruptCheckpoint("missing format_version".into()))?;
        if found != u64::from(FORMAT_VERSION) {
            return Err(Error::VersionMismatch {
                found: u32::try_from(found).unwrap_or(u32::MAX),
                expected: FORMAT_VERSION,
            });
        }
        let ckpt: Checkpoint =
            serde_json::from_value(value).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    /// Writes to a sibling temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Cross-checks the shapes of the stored components.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::CorruptCheckpoint(m));
        let fm = &self.feature_map;
        if fm.directions().len() != fm.num_features() * fm.dims_in() || fm.log_scale().len() != fm.dims_in() {
            return bad("feature map shape".into());
        }
        if self.ball.center.len() != fm.dims_out() {
            return bad(format!(
                "ball center has {} entries, feature space has {}",
                self.ball.center.len(),
                fm.dims_out()
            ));
        }
        if !(self.ball.radius_sq >= 0.0) {
            return bad("negative squared radius".into());
        }
        if self.generator.out_dim() != fm.dims_in() || self.generator.noise_dim() != self.config.noise.dim {
            return bad("generator shape does not match feature map or noise".into());
        }
        let opt = &self.ball_optimizer;
        if opt.radius_sq.len() != 1 || opt.center.len() != fm.dims_out() || opt.log_scale.len() != fm.dims_in() {
            return bad("ball optimizer shape".into());
        }
        if self.generator_optimizer.len() != self.generator.num_params() {
            return bad("generator optimizer shape".into());
        }
        if let Some(s) = &self.scale_applied {
            if s.shift.len() != fm.dims_in() || s.factor.len() != fm.dims_in() || s.factor.contains(&0.0) {
                return bad("scale shape".into());
            }
        }
        if self.epochs_completed > self.config.total_epochs {
            return bad("more epochs completed than configured".into());
        }
        self.config.validate().or_else(|e| bad(e.to_string()))
    }

    /// `R^2 - ||phi(x) - c||^2` for a point in raw data coordinates.
    pub fn decision_value_raw(&self, x: &[f64]) -> Result<f64> {
        match &self.scale_applied {
            Some(s) => self.ball.decision_value(&self.feature_map, &s.apply(x)),
            None => self.ball.decision_value(&self.feature_map, x),
        }
    }
}
