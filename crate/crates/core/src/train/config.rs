use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::nets::ArchConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    /// Heatmap supervision only.
    PoseOnly,
    /// Adds the appearance branch, image reconstruction and the adversarial terms.
    PoseRecon,
    /// Adds mixing, re-encoding and the cycle/dual terms.
    SelfDisentangle,
    /// Pose features swapped across images that share a pose.
    PairedSupervised,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::PoseOnly => "pose_only",
            Mode::PoseRecon => "pose_recon",
            Mode::SelfDisentangle => "self_disentangle",
            Mode::PairedSupervised => "paired_supervised",
        }
    }

    pub fn uses_images(self) -> bool {
        self != Mode::PoseOnly
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub mode: Mode,
    pub epochs: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub detach_pose_into_image_decoder: bool,
    pub freeze_cycle_evaluators: bool,
    pub train_pose_estimator_on_mixed: bool,
    pub gan_on_mixed: bool,
    /// Refresh the frozen decoder copies every this many steps.
    pub frozen_refresh_interval: u64,
    pub seed: u64,
    /// Checkpoint directory to continue from.
    pub resume: Option<PathBuf>,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::SelfDisentangle,
            epochs: 30,
            batch_size: 32,
            lr: 1e-3,
            weights: LossWeights::default(),
            detach_pose_into_image_decoder: true,
            freeze_cycle_evaluators: true,
            train_pose_estimator_on_mixed: false,
            gan_on_mixed: true,
            frozen_refresh_interval: 1,
            seed: 0,
            resume: None,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Parses a JSON document; absent keys take their defaults, unknown keys
    /// and ill-typed values are rejected with the key path named.
    pub fn from_json(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." {
                Error::Config(e.into_inner().to_string())
            } else {
                Error::Config(format!("`{path}`: {}", e.into_inner()))
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("`batch_size` must be at least 1".into()));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("`lr` must be positive, got {}", self.lr)));
        }
        if self.frozen_refresh_interval == 0 {
            return Err(Error::Config("`frozen_refresh_interval` must be at least 1".into()));
        }
        self.weights.validate().map_err(|e| Error::Config(e.to_string()))?;
        self.arch.validate().map_err(|e| Error::Config(e.to_string()))
    }
}
