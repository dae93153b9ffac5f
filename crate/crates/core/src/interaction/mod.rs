//! Interaction detection between canonical and posed point sets.

pub mod detect;
pub mod index;

pub use detect::{brute_force_detect, detect_interactions, inherit_from_parents, DetectionConfig, InteractionLabels};
pub use index::{brute_force_knn, NeighborIndex};

use crate::error::Result;

/// The `k` nearest indices to `q` (nearest first, ties by ascending index).
pub fn neighbor_set(index: &NeighborIndex, q: &[f64; 3], k: usize) -> Result<Vec<u32>> {
    index.knn(q, k)
}
