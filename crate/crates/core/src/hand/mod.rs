//! Procedural parametric two-hand model: rig, tube mesh, skinning, subdivision.

pub mod mesh;
pub mod points;
pub mod pose;
pub mod rig;
pub mod subdivide;

pub use mesh::HandMesh;
pub use points::{vertices_to_points, MeshPoint, TwoHandScene, INTERACTION_RADIUS};
pub use pose::{pose_mesh, HandPose, PoseParams};
pub use rig::{build_rig, HandSide, RigSpec, SkeletonRig};
pub use subdivide::{subdivide, subdivide_once, upsample_mesh, Subdivision};

use crate::error::Result;

/// Builds the skeleton and its canonical level-0 mesh from a rig spec.
pub fn build_canonical_rig(spec: &RigSpec) -> Result<(SkeletonRig, HandMesh)> {
    let rig = build_rig(spec)?;
    let mesh = mesh::build_mesh(&rig, spec);
    mesh.validate()?;
    Ok((rig, mesh))
}

/// Rig plus canonical meshes at each subdivision level up to `max_level`.
#[derive(Debug, Clone)]
pub struct HandModel {
    pub rig: SkeletonRig,
    /// Level `l` mesh with parents in the level-0 mesh.
    pub levels: Vec<Subdivision>,
    /// For level `l > 0`, the parent of each vertex in level `l - 1`.
    step_parents: Vec<Vec<u32>>,
}

impl HandModel {
    pub fn new(spec: &RigSpec, max_level: usize) -> Result<Self> {
        let (rig, base) = build_canonical_rig(spec)?;
        let n0 = base.vertex_count() as u32;
        let mut levels = vec![Subdivision { mesh: base, parent: (0..n0).collect() }];
        let mut step_parents = vec![(0..n0).collect()];
        for l in 1..=max_level {
            let step = subdivide_once(&levels[l - 1].mesh);
            let parent = step.parent.iter().map(|&p| levels[l - 1].parent[p as usize]).collect();
            step_parents.push(step.parent);
            levels.push(Subdivision { mesh: step.mesh, parent });
        }
        Ok(HandModel { rig, levels, step_parents })
    }

    pub fn default_model(max_level: usize) -> Self {
        Self::new(&RigSpec::default_spec(), max_level).expect("shipped rig builds")
    }

    pub fn canonical(&self, level: usize) -> &HandMesh {
        &self.levels[level].mesh
    }

    pub fn max_level(&self) -> usize {
        self.levels.len() - 1
    }

    /// Maps each vertex of level `fine` to its ancestor at level `coarse`.
    pub fn ancestors(&self, fine: usize, coarse: usize) -> Vec<u32> {
        assert!(coarse <= fine && fine <= self.max_level());
        let mut map: Vec<u32> = (0..self.canonical(fine).vertex_count() as u32).collect();
        for l in (coarse + 1..=fine).rev() {
            for m in map.iter_mut() {
                *m = self.step_parents[l][*m as usize];
            }
        }
        map
    }

    pub fn scene(&self, level: usize, pose: PoseParams, subject: usize) -> Result<TwoHandScene> {
        TwoHandScene::new(self.canonical(level).clone(), &self.rig, pose, subject)
    }
}
