use serde::{Deserialize, Serialize};

use super::mesh::HandMesh;
use super::pose::{pose_mesh, PoseParams};
use super::rig::{HandSide, SkeletonRig};
use crate::error::{Error, Result};

/// Minimum inter-hand distance of the canonical mesh, in meters.
pub const INTERACTION_RADIUS: f64 = 0.1;

/// An initial Gaussian position taken from a mesh vertex.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeshPoint {
    pub position: [f64; 3],
    pub uv: [f64; 2],
    pub side: HandSide,
    pub vertex: u32,
}

pub fn vertices_to_points(mesh: &HandMesh) -> Vec<MeshPoint> {
    mesh.vertices
        .iter()
        .zip(&mesh.uv)
        .zip(&mesh.side)
        .enumerate()
        .map(|(i, ((p, uv), side))| MeshPoint { position: *p, uv: *uv, side: *side, vertex: i as u32 })
        .collect()
}

/// Interaction-free canonical mesh and its posed counterpart.
#[derive(Debug, Clone)]
pub struct TwoHandScene {
    pub canonical: HandMesh,
    pub posed: HandMesh,
    pub pose: PoseParams,
    pub subject: usize,
}

impl TwoHandScene {
    pub fn new(canonical: HandMesh, rig: &SkeletonRig, pose: PoseParams, subject: usize) -> Result<Self> {
        let d = canonical.min_inter_hand_distance();
        if !(d > INTERACTION_RADIUS) {
            return Err(Error::Invalid(format!(
                "canonical hands are {d:.3} m apart, need more than {INTERACTION_RADIUS} m"
            )));
        }
        let posed = pose_mesh(&canonical, rig, &pose)?;
        Ok(TwoHandScene { canonical, posed, pose, subject })
    }

    pub fn canonical_positions(&self) -> &[[f64; 3]] {
        &self.canonical.vertices
    }

    pub fn posed_positions(&self) -> &[[f64; 3]] {
        &self.posed.vertices
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hand::mesh::build_mesh;
    use crate::hand::rig::{build_rig, RigSpec};

    #[test]
    fn one_point_per_vertex_with_matching_uv() {
        let spec = RigSpec::default_spec();
        let mesh = build_mesh(&build_rig(&spec).unwrap(), &spec);
        let pts = vertices_to_points(&mesh);
        assert_eq!(pts.len(), mesh.vertex_count());
        for (i, p) in pts.iter().enumerate() {
            assert_eq!(p.uv, mesh.uv[i]);
            assert_eq!(p.position, mesh.vertices[i]);
            assert_eq!(p.vertex as usize, i);
        }
    }
}
