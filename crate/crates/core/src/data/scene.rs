//! Scene files: rig, subject, and per-frame poses, cameras and images.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hand::{PoseParams, RigSpec};
use crate::raster::Camera;

pub const SCENE_VERSION: u32 = 1;

/// Point every camera looks at: roughly the middle of the two hands.
pub const SCENE_CENTER: [f64; 3] = [0.0, 0.0, 0.09];

/// The fixed four-view camera rig used by the synthetic datasets.
pub fn camera_rig(width: usize, height: usize) -> Vec<Camera> {
    let eyes = [[0.0, 0.6, 0.1], [0.0, -0.6, 0.1], [0.35, 0.42, -0.25], [-0.35, 0.42, 0.45]];
    eyes.iter().map(|&e| Camera::look_at(e, SCENE_CENTER, [0.0, 0.0, 1.0], 45.0, width, height)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub scene_version: u32,
    /// Rig spec path relative to the scene file, or `default` for the shipped rig.
    pub rig: String,
    pub subject: usize,
    pub poses: Vec<PoseParams>,
    pub cameras: Vec<Camera>,
    /// Target images relative to the scene file; may be empty for self-rendered scenes.
    #[serde(default)]
    pub images: Vec<String>,
    #[serde(default)]
    pub masks: Vec<String>,
}

impl SceneFile {
    pub fn new(subject: usize) -> Self {
        SceneFile { scene_version: SCENE_VERSION, rig: "default".into(), subject, poses: Vec::new(), cameras: Vec::new(), images: Vec::new(), masks: Vec::new() }
    }

    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scene_version != SCENE_VERSION {
            return Err(Error::Version { kind: "scene file", found: self.scene_version, expected: SCENE_VERSION });
        }
        let n = self.poses.len();
        if self.cameras.len() != n {
            return Err(Error::Invalid(format!("{n} poses but {} cameras", self.cameras.len())));
        }
        for (what, list) in [("images", &self.images), ("masks", &self.masks)] {
            if !list.is_empty() && list.len() != n {
                return Err(Error::Invalid(format!("{n} poses but {} {what}", list.len())));
            }
        }
        for c in &self.cameras {
            c.validate()?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let s: SceneFile = toml::from_str(text).map_err(|e| Error::Format(format!("scene file: {e}")))?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(format!("scene file: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn rig_spec(&self, base: &Path) -> Result<RigSpec> {
        if self.rig == "default" {
            Ok(RigSpec::default_spec())
        } else {
            RigSpec::parse(&std::fs::read_to_string(base.join(&self.rig))?)
        }
    }

    pub fn resolve(base: &Path, rel: &str) -> PathBuf {
        base.join(rel)
    }
}

/// A list of poses, as read by `detect`, `fit` and `animate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseFile {
    pub poses: Vec<PoseParams>,
}

impl PoseFile {
    pub fn parse(text: &str) -> Result<Self> {
        let p: PoseFile = toml::from_str(text).map_err(|e| Error::Format(format!("pose file: {e}")))?;
        if p.poses.is_empty() {
            return Err(Error::Invalid("pose file lists no poses".into()));
        }
        Ok(p)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Format(format!("pose file: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}
