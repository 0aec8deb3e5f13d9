//! The run configuration: one TOML document that fixes every stage.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::commands::data::DataConfig;
use crate::error::{MovError, Result};
use crate::evaluator::InferenceConfig;
use crate::fusion::ModelConfig;
use crate::synthdata::SynthConfig;
use crate::trainer::{PretrainConfig, TrainConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    /// Dataset directory holding `manifest.jsonl`.
    pub data_dir: PathBuf,
    /// Pretrained backbone checkpoint; random initialisation when absent.
    pub backbone: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            backbone: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Seed for model initialisation; also copied into every stage by [`RunConfig::with_seed`].
    pub seed: u64,
    pub paths: Paths,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
}

pub const CONFIG_SNAPSHOT: &str = "config.toml";

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| MovError::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| MovError::io(path, e))?;
        Self::from_toml(&text).map_err(|e| MovError::config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| MovError::Serde(e.to_string()))
    }

    /// Writes the effective configuration into `dir`.
    pub fn snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| MovError::io(dir, e))?;
        let p = dir.join(CONFIG_SNAPSHOT);
        fs::write(&p, self.to_toml()?).map_err(|e| MovError::io(&p, e))
    }

    /// Sets the run seed and every stage seed that derives from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.synth.seed = seed;
        self.pretrain.seed = seed;
        self.train.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.synth
            .validate()
            .map_err(|e| MovError::config(format!("[synth] {e}")))?;
        self.model.validate()?;
        self.pretrain.validate()?;
        self.train.validate()?;
        self.inference.validate()?;
        if self.data.crop_hw != self.model.vit.image_hw.0 || self.data.crop_hw != self.model.vit.image_hw.1 {
            return Err(MovError::config(format!(
                "crop size {} does not match the encoder input {:?}",
                self.data.crop_hw, self.model.vit.image_hw
            )));
        }
        if self.data.crop_hw > self.synth.world.frame_hw {
            return Err(MovError::config("crop larger than the rendered frames"));
        }
        if self.data.frames_per_clip == 0 || self.data.stride == 0 {
            return Err(MovError::config("frames per clip and stride must be positive"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        c.validate().unwrap();
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn partial_document_keeps_defaults() {
        let c = RunConfig::from_toml("seed = 3\n[train]\nepochs = 7\ntrainable_layers = \"all\"\n").unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.alpha, 0.5);
        assert_eq!(c.seed, 3);
    }

    #[test]
    fn unknown_keys_and_bad_values_rejected() {
        assert!(matches!(RunConfig::from_toml("sed = 3\n"), Err(MovError::Config(_))));
        assert!(matches!(RunConfig::from_toml("[train]\nalpha = 2.0\n"), Err(MovError::Config(_))));
        assert!(matches!(RunConfig::from_toml("[inference]\ntau_v = 0.0\n"), Err(MovError::Config(_))));
    }

    #[test]
    fn seed_propagates() {
        let c = RunConfig::default().with_seed(9);
        assert_eq!((c.synth.seed, c.train.seed, c.pretrain.seed), (9, 9, 9));
    }
}
