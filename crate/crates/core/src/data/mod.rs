//! Synthetic data, scene files and experiment configuration.

pub mod artifacts;
pub mod config;
pub mod dataset;
pub mod poses;
pub mod scene;

pub use artifacts::{card_path, load_avatar, save_avatar, FittedSubject, ModelCard};
pub use config::{ExperimentConfig, Origin, PROVENANCE};
pub use dataset::{
    gen_synthetic_dataset, generator_avatar, ground_truth_cloud, hidden_identity, load_dataset, synthesize, synthesize_from_avatar, Appearance, Dataset, DatasetConfig,
    LoadedFrame, SubjectTexture, IDENTITY_BLOCK, IDENTITY_FILE,
};
pub use poses::{make_pose, pose_schedule, PoseKind};
pub use scene::{camera_rig, PoseFile, SceneFile, SCENE_CENTER};
