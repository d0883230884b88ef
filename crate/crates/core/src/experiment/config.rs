use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flops::TimeModel;
use crate::nn::ArchConfig;
use crate::optim::SgdConfig;
use crate::schedule::{LrConfig, Rho, ScheduleSpec};
use crate::synth::SceneConfig;

pub const SCHEMA_VERSION: u32 = 1;

/// Everything a run depends on. A config fully determines every output byte.
///
/// `seed` drives parameter initialization and per-epoch shuffling; the data
/// come from `scene.seed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    pub total_epochs: u64,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub n_train: usize,
    pub n_val: usize,
    pub arch: ArchConfig,
    #[serde(default)]
    pub scene: SceneConfig,
    #[serde(default)]
    pub lr: LrConfig,
    #[serde(default)]
    pub sgd: SgdConfig,
    pub schedule: ScheduleSpec,
    #[serde(default)]
    pub time_model: TimeModel,
}

fn default_eval_every() -> u64 {
    1
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs/default")
}

impl ExperimentConfig {
    /// Default desk-scale setup: 32x32 RGB scenes with 3 classes, 256 train /
    /// 64 val, 16 epochs, full fine-tuning until epoch 4 then step freezing.
    pub fn desk(rho: Rho) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            total_epochs: 16,
            eval_every: 4,
            output_dir: default_output_dir(),
            n_train: 256,
            n_val: 64,
            arch: ArchConfig::desk(3),
            scene: SceneConfig::default(),
            lr: LrConfig {
                base_lr: 0.02,
                warmup_iters: 32,
                ..LrConfig::default()
            },
            sgd: SgdConfig::default(),
            schedule: ScheduleSpec::two_phase(4, rho).expect("valid desk schedule"),
            time_model: TimeModel::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if self.total_epochs == 0 {
            return Err(Error::Config("total_epochs must be >= 1".into()));
        }
        if self.eval_every == 0 {
            return Err(Error::Config("eval_every must be >= 1".into()));
        }
        self.scene.validate()?;
        self.lr.validate()?;
        self.sgd.validate()?;
        self.time_model.validate()?;
        let expected_input = [
            self.scene.channels,
            self.scene.image_size,
            self.scene.image_size,
        ];
        if self.arch.input_shape != expected_input {
            return Err(Error::Config(format!(
                "arch.input_shape {:?} does not match scene images {expected_input:?}",
                self.arch.input_shape
            )));
        }
        if self.arch.num_classes != self.scene.num_classes {
            return Err(Error::Config(format!(
                "arch.num_classes {} differs from scene.num_classes {}",
                self.arch.num_classes, self.scene.num_classes
            )));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serializable")
    }
}
