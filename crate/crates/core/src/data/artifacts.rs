//! On-disk model checkpoints and one-shot fit results.
//!
//! A checkpoint is a binary parameter store plus a TOML card next to it
//! (`model.ckpt` and `model.toml`) holding the model config and the rig.
//! A fit result is a directory with `fit.bin` and `fit.toml`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ParamStore;
use crate::gaussians::RefinePlan;
use crate::graph::Tensor;
use crate::hand::{HandModel, RigSpec};
use crate::optimize::{Avatar, ColorCalibration, FitResult, ModelConfig};

pub const CARD_VERSION: u32 = 1;
pub const FIT_VERSION: u32 = 1;
pub const FIT_PARAMS: &str = "fit.bin";
pub const FIT_CARD: &str = "fit.toml";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCard {
    pub card_version: u32,
    pub max_level: usize,
    pub model: ModelConfig,
    pub rig: RigSpec,
}

pub fn card_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("toml")
}

pub fn save_avatar(avatar: &Avatar, rig: &RigSpec, checkpoint: &Path) -> Result<()> {
    avatar.weights.save(checkpoint)?;
    let card = ModelCard { card_version: CARD_VERSION, max_level: avatar.max_level(), model: avatar.config, rig: rig.clone() };
    std::fs::write(card_path(checkpoint), toml::to_string(&card)?)?;
    Ok(())
}

pub fn load_avatar(checkpoint: &Path) -> Result<Avatar> {
    let cp = card_path(checkpoint);
    let text = std::fs::read_to_string(&cp).map_err(|e| Error::Invalid(format!("cannot read {}: {e}", cp.display())))?;
    let card: ModelCard = toml::from_str(&text)?;
    if card.card_version != CARD_VERSION {
        return Err(Error::Version { kind: "model card", found: card.card_version, expected: CARD_VERSION });
    }
    let weights = ParamStore::load(checkpoint)?;
    Avatar::new(card.model, HandModel::new(&card.rig, card.max_level)?, weights)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct FitCard {
    fit_version: u32,
    level: usize,
    calibration: ColorCalibration,
    plan: RefinePlan,
}

/// The parts of a fit needed to render the subject again.
#[derive(Debug, Clone, PartialEq)]
pub struct FittedSubject {
    pub level: usize,
    pub identity: Tensor,
    pub texture_bias: Tensor,
    pub calibration: ColorCalibration,
    pub plan: RefinePlan,
}

impl FittedSubject {
    pub fn from_result(r: &FitResult, level: usize) -> Self {
        FittedSubject { level, identity: r.identity.clone(), texture_bias: r.texture_bias.clone(), calibration: r.calibration, plan: r.plan.clone() }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut store = ParamStore::new();
        store.insert("identity", self.identity.clone());
        store.insert("texture_bias", self.texture_bias.clone());
        store.save(&dir.join(FIT_PARAMS))?;
        let card = FitCard { fit_version: FIT_VERSION, level: self.level, calibration: self.calibration, plan: self.plan.clone() };
        std::fs::write(dir.join(FIT_CARD), toml::to_string(&card)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let card: FitCard = toml::from_str(&std::fs::read_to_string(dir.join(FIT_CARD))?)?;
        if card.fit_version != FIT_VERSION {
            return Err(Error::Version { kind: "fit result", found: card.fit_version, expected: FIT_VERSION });
        }
        let store = ParamStore::load(&dir.join(FIT_PARAMS))?;
        Ok(FittedSubject {
            level: card.level,
            identity: store.require("identity")?.clone(),
            texture_bias: store.require("texture_bias")?.clone(),
            calibration: card.calibration,
            plan: card.plan,
        })
    }
}
