//! Losses, the Adam optimizer, stage-one training and one-shot fitting.

pub mod adam;
pub mod fit;
pub mod losses;
pub mod model;
pub mod train;

pub use adam::Adam;
pub use fit::{fit_one_shot, FitConfig, FitInput, FitReport, FitResult};
pub use losses::{l1_loss, mask_loss, perceptual_loss, LossWeights, Perceptual};
pub use model::{Avatar, ColorCalibration, MIN_GAIN, Evaluation, FrameGeometry, LossSetup, LossTerms, ModelConfig, Refine, Target};
pub use train::{Sample, Trainer, TrainConfig};

#[cfg(test)]
mod tests;
