//! Flat run configuration, stored as TOML next to every run's outputs.
//!
//! ```toml
//! task = "pick-place"        # reach | pick-place
//! model = "equivariant"      # equivariant | mlp-baseline
//! fusion = true              # image tokens through the fusion module
//! n_demos = 100
//! data_seed = 1
//! data = "runs/data"         # optional; generated from the three keys above when absent
//! lr = 0.001
//! batch_size = 64
//! epochs = 300
//! ema_decay = 0.95
//! horizon = 16
//! sampler_steps = 10
//! seed = 0
//! weight_decay = 1e-6
//! grad_clip = 1.0
//! warmup_steps = 0
//! probe_size = 256
//! eval_episodes = 50
//! eval_seed = 123
//! perturbation = "none"      # none | haar | yaw:<deg> | tilt:<deg>
//! out = "runs/default"
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bench::{Perturbation, Task};
use crate::error::{Error, Result};
use crate::flow::TrainConfig;
use crate::policy::{EquiPolicyConfig, MlpPolicyConfig, ModelConfig};

/// File name of the resolved configuration inside a run directory.
pub const RESOLVED_CONFIG: &str = "config.toml";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Equivariant,
    MlpBaseline,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Equivariant => "equivariant",
            ModelKind::MlpBaseline => "mlp-baseline",
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equivariant" | "equi" => Ok(ModelKind::Equivariant),
            "mlp-baseline" | "mlp" => Ok(ModelKind::MlpBaseline),
            _ => Err(Error::Validation(format!("unknown model '{s}' (expected equivariant or mlp-baseline)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub task: Task,
    pub model: ModelKind,
    pub fusion: bool,
    pub n_demos: usize,
    pub data_seed: u64,
    /// Saved dataset to train on instead of generating one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub ema_decay: f64,
    pub horizon: usize,
    pub sampler_steps: usize,
    pub seed: u64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub warmup_steps: usize,
    pub probe_size: usize,
    pub eval_episodes: usize,
    pub eval_seed: u64,
    pub perturbation: String,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        RunConfig {
            task: Task::PickPlace,
            model: ModelKind::Equivariant,
            fusion: true,
            n_demos: 100,
            data_seed: 1,
            data: None,
            lr: 1e-3,
            batch_size: t.batch_size,
            epochs: 300,
            ema_decay: t.ema_decay,
            horizon: t.horizon,
            sampler_steps: t.sampler_steps,
            seed: t.seed,
            weight_decay: t.weight_decay,
            grad_clip: t.grad_clip,
            warmup_steps: t.warmup_steps,
            probe_size: t.probe_size,
            eval_episodes: 50,
            eval_seed: 123,
            perturbation: "none".into(),
            out: PathBuf::from("runs/default"),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("flat config serializes")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    /// Writes the resolved configuration into `dir`.
    pub fn save_resolved(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir)?;
        let path = dir.join(RESOLVED_CONFIG);
        fs::write(&path, self.to_toml())?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.perturbation()?;
        if self.n_demos == 0 || self.eval_episodes == 0 {
            return Err(Error::Config("n_demos and eval_episodes must be positive".into()));
        }
        if !(self.weight_decay >= 0.0 && self.grad_clip >= 0.0) {
            return Err(Error::Config("weight_decay and grad_clip must be non-negative".into()));
        }
        Ok(())
    }

    pub fn perturbation(&self) -> Result<Perturbation> {
        self.perturbation.parse()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            ema_decay: self.ema_decay,
            horizon: self.horizon,
            sampler_steps: self.sampler_steps,
            seed: self.seed,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            warmup_steps: self.warmup_steps,
            probe_size: self.probe_size,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        match self.model {
            ModelKind::Equivariant => {
                ModelConfig::Equivariant(EquiPolicyConfig { horizon: self.horizon, fusion: self.fusion, ..Default::default() })
            }
            ModelKind::MlpBaseline => {
                ModelConfig::MlpBaseline(MlpPolicyConfig { horizon: self.horizon, ..Default::default() })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let cfg = RunConfig { task: Task::Reach, model: ModelKind::MlpBaseline, lr: 0.0, ..Default::default() };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_defaults() {
        let cfg = RunConfig::from_toml("task = \"reach\"\nepochs = 3\n").unwrap();
        assert_eq!(cfg.task, Task::Reach);
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 64);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::from_toml("lr_typo = 1.0").is_err());
        assert!(RunConfig::from_toml("batch_size = 0").is_err());
        assert!(RunConfig::from_toml("perturbation = \"spin:3\"").is_err());
    }
}
