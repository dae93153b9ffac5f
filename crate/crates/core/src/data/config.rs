//! Experiment configuration with the origin of every default.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::DatasetConfig;
use crate::error::{Error, Result};
use crate::optimize::{FitConfig, ModelConfig, TrainConfig};

pub const CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub config_version: u32,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub fit: FitConfig,
    pub data: DatasetConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            config_version: CONFIG_VERSION,
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            fit: FitConfig::default(),
            data: DatasetConfig::default(),
        }
    }
}

/// Where a default value comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Paper,
    Chosen,
}

/// Origin of each configuration field, keyed by its dotted path.
pub const PROVENANCE: &[(&str, Origin, &str)] = &[
    ("model.net.feature_dim", Origin::Chosen, "desk-scale feature width"),
    ("model.net.pose_dim", Origin::Chosen, "desk-scale pose embedding width"),
    ("model.net.bands", Origin::Chosen, "positional encoding bands"),
    ("model.net.map_height", Origin::Chosen, "uv map resolution"),
    ("model.net.map_width", Origin::Chosen, "uv map resolution"),
    ("model.net.hidden", Origin::Chosen, "perceptron width"),
    ("model.net.head_hidden", Origin::Chosen, "attribute head width"),
    ("model.net.offset_clamp", Origin::Chosen, "largest position offset, meters"),
    ("model.detection.canonical_neighbours", Origin::Paper, "N_c = 100"),
    ("model.detection.posed_neighbours", Origin::Chosen, "set equal to N_c"),
    ("model.detection.threshold", Origin::Paper, "T = 90"),
    ("model.refinement.prune_below", Origin::Chosen, "validity prune threshold"),
    ("model.refinement.split_above", Origin::Chosen, "validity split threshold"),
    ("model.refinement.max_split_fraction", Origin::Chosen, "cap on splits per pass"),
    ("model.detect_level", Origin::Chosen, "detector runs on the level-1 mesh"),
    ("model.attention", Origin::Paper, "interaction attention enabled"),
    ("model.background", Origin::Chosen, "black background"),
    ("train.lr", Origin::Paper, "1e-4"),
    ("train.batch_size", Origin::Chosen, "desk-scale batch"),
    ("train.weights.rgb", Origin::Paper, "lambda_rgb = 10"),
    ("train.weights.perceptual", Origin::Paper, "lambda_VGG = 0.1"),
    ("train.coarse_level", Origin::Paper, "coarse-to-fine subdivision"),
    ("train.fine_level", Origin::Paper, "coarse-to-fine subdivision"),
    ("train.coarse_fraction", Origin::Paper, "five of eight epochs on the coarse level"),
    ("fit.steps", Origin::Paper, "50 steps"),
    ("fit.lr", Origin::Paper, "1e-2"),
    ("fit.weights.mask", Origin::Paper, "lambda_mask = 1"),
    ("fit.weights.reg", Origin::Paper, "lambda_reg = 0.01"),
    ("fit.calibration_lr_scale", Origin::Chosen, "slower calibration updates"),
    ("data.width", Origin::Chosen, "desk-scale image size"),
    ("data.height", Origin::Chosen, "desk-scale image size"),
    ("seed", Origin::Chosen, "global seed"),
];

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.config_version != CONFIG_VERSION {
            return Err(Error::Version { kind: "experiment config", found: self.config_version, expected: CONFIG_VERSION });
        }
        self.model.validate()?;
        self.model.detection.validate(self.model.detection.canonical_neighbours.max(self.model.detection.posed_neighbours))?;
        self.train.validate()?;
        self.fit.weights.validate()?;
        self.data.validate()?;
        if self.fit.level > self.train.fine_level.max(self.data.level) {
            log::warn!("fit level {} is finer than anything trained", self.fit.level);
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let c: ExperimentConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// TOML text followed by a comment block recording each field's origin.
    pub fn to_annotated_toml(&self) -> Result<String> {
        let mut s = toml::to_string(self)?;
        s.push_str("\n# Provenance of the defaults (paper = stated in the paper, chosen = implementation choice)\n");
        for (key, origin, note) in PROVENANCE {
            let o = match origin {
                Origin::Paper => "paper",
                Origin::Chosen => "chosen",
            };
            s.push_str(&format!("# {key}: {o} ({note})\n"));
        }
        Ok(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_and_validate() {
        let c = ExperimentConfig::default();
        c.validate().unwrap();
        let text = c.to_annotated_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), c);
    }

    #[test]
    fn paper_values_are_the_defaults() {
        let c = ExperimentConfig::default();
        assert_eq!(c.model.detection.canonical_neighbours, 100);
        assert_eq!(c.model.detection.threshold, 90);
        assert_eq!(c.train.lr, 1e-4);
        assert_eq!(c.fit.lr, 1e-2);
        assert_eq!(c.fit.steps, 50);
        let w = c.fit.weights;
        assert_eq!((w.rgb, w.perceptual, w.mask, w.reg), (10.0, 0.1, 1.0, 0.01));
    }

    #[test]
    fn every_provenance_key_names_a_field() {
        let value: toml::Value = toml::Value::try_from(ExperimentConfig::default()).unwrap();
        for (key, _, _) in PROVENANCE {
            let mut v = &value;
            for part in key.split('.') {
                v = v.get(part).unwrap_or_else(|| panic!("no field {key}"));
            }
        }
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut c = ExperimentConfig::default();
        c.train.batch_size = 0;
        assert!(ExperimentConfig::parse(&toml::to_string(&c).unwrap()).is_err());
        let mut c = ExperimentConfig::default();
        c.config_version = 9;
        assert!(matches!(ExperimentConfig::parse(&toml::to_string(&c).unwrap()), Err(Error::Version { .. })));
    }
}
