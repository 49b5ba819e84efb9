//! Run configuration: one TOML document holding every tunable.
//!
//! Unknown keys are rejected and every field has a default, so an empty
//! document is a valid configuration. The `SAB_SEED` environment variable
//! overrides `seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::optim::{AdamWConfig, PolySchedule};

pub const SEED_ENV: &str = "SAB_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub base_lr: f64,
    pub poly_power: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        let a = AdamWConfig::default();
        OptimConfig {
            base_lr: 1e-4,
            poly_power: 0.9,
            beta1: a.beta1,
            beta2: a.beta2,
            eps: a.eps,
            weight_decay: a.weight_decay,
        }
    }
}

impl OptimConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Total optimizer steps `T` of the schedule.
    pub steps: u64,
    pub batch_size: usize,
    /// Steps between held-in evaluations (and best/last checkpoints).
    pub eval_every: u64,
    /// Leading training samples scored for best-checkpoint selection.
    pub held_in: usize,
    pub log_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            batch_size: 16,
            eval_every: 250,
            held_in: 64,
            log_every: 10,
        }
    }
}

/// Synthetic data generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub seed: u64,
    pub count: usize,
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            seed: 1,
            count: 512,
            image_size: 64,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seeds parameter initialization and batch order.
    pub seed: u64,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            optim: OptimConfig::default(),
            train: TrainConfig::default(),
            data: DataConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl RunConfig {
    /// Parses and validates without consulting the environment.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path`, applies `SAB_SEED` if set, and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = RunConfig::from_toml(&text)?;
        cfg.apply_env()?;
        Ok(cfg)
    }

    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn schedule(&self) -> Result<PolySchedule> {
        PolySchedule::new(self.optim.base_lr, self.train.steps, self.optim.poly_power)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optim.adamw().validate()?;
        self.schedule()?;
        let t = &self.train;
        if t.batch_size == 0 || t.eval_every == 0 || t.log_every == 0 || t.held_in == 0 {
            return Err(Error::Config(
                "batch_size, eval_every, log_every and held_in must be positive".into(),
            ));
        }
        if self.data.count == 0 || self.data.image_size == 0 || self.data.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "data.count must be positive and data.image_size a multiple of 32 (got {})",
                self.data.image_size
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_gives_defaults() {
        let cfg = RunConfig::from_toml("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.loss.lambda, 0.5);
        assert_eq!(cfg.optim.base_lr, 1e-4);
        assert_eq!(cfg.optim.weight_decay, 0.05);
        assert_eq!(cfg.optim.poly_power, 0.9);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.model.scales, vec![32, 16, 8, 4]);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("sede = 3").is_err());
        assert!(RunConfig::from_toml("[loss]\nlamda = 0.3").is_err());
        assert!(RunConfig::from_toml("[optim]\nweight_decay = 0.1\nmomentum = 0.9").is_err());
    }

    #[test]
    fn values_parse_and_validate() {
        let cfg = RunConfig::from_toml(
            "seed = 4\n[model]\nscales = [32, 16]\nattention = \"self\"\n[loss]\nlambda = 1.0\n[optim]\nweight_decay = 0.0\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 4);
        assert_eq!(cfg.model.scales, vec![32, 16]);
        assert_eq!(cfg.optim.weight_decay, 0.0);
        assert!(RunConfig::from_toml("[loss]\nlambda = 2.0").is_err());
        assert!(RunConfig::from_toml("[model]\nscales = [16]").is_err());
        assert!(RunConfig::from_toml("[data]\nimage_size = 60").is_err());
    }

    #[test]
    fn toml_round_trip_is_exact() {
        let mut cfg = RunConfig::default();
        cfg.optim.base_lr = 0.1 + 0.2;
        cfg.loss.matrix_epsilon = 1.0 / 3.0;
        cfg.paths.out = Some("runs/a".into());
        let back = RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
    }
}
