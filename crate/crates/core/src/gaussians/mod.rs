//! Gaussian attributes, refinement, and cloud snapshots.

pub mod cloud;
pub mod heads;
pub mod refine;

pub use cloud::{Gaussian, GaussianCloud};
pub use heads::{predict_attributes, COLOR_COLS, AttrVars, PointMeta};
pub use refine::{apply_plan, inherit_labels, refine, split_children, RefinePlan, RefinementConfig};

#[cfg(test)]
mod tests;
