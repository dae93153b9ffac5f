//! Pose and shape parameters and linear blend skinning.

use nalgebra::{Matrix3, Matrix4, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use super::mesh::HandMesh;
use super::rig::SkeletonRig;
use crate::error::{Error, Result};

pub const THETA_DIM: usize = 48;
pub const BETA_DIM: usize = 10;
pub const BETA_BOUND: f64 = 3.0;

/// Pose of one hand. `theta` holds one axis-angle triple per joint in the
/// hand's joint order; `beta` scales bone lengths and tube radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandPose {
    pub theta: Vec<f64>,
    pub beta: Vec<f64>,
    /// World-space rigid transform applied after articulation (axis-angle, translation).
    pub root_rotation: [f64; 3],
    pub root_translation: [f64; 3],
}

impl HandPose {
    pub fn rest() -> Self {
        HandPose { theta: vec![0.0; THETA_DIM], beta: vec![0.0; BETA_DIM], root_rotation: [0.0; 3], root_translation: [0.0; 3] }
    }

    pub fn joint_rotation(&self, j: usize) -> [f64; 3] {
        [self.theta[3 * j], self.theta[3 * j + 1], self.theta[3 * j + 2]]
    }

    pub fn set_joint_rotation(&mut self, j: usize, aa: [f64; 3]) {
        self.theta[3 * j..3 * j + 3].copy_from_slice(&aa);
    }

    /// Sets the root transform so the hand rotates by `aa` about `pivot` and then translates by `shift`.
    pub fn set_root_about(&mut self, aa: [f64; 3], pivot: [f64; 3], shift: [f64; 3]) {
        let r = Rotation3::new(Vector3::from(aa));
        let p = Vector3::from(pivot);
        let t = p - r * p + Vector3::from(shift);
        self.root_rotation = aa;
        self.root_translation = [t.x, t.y, t.z];
    }

    fn root_matrix(&self) -> Matrix4<f64> {
        let r = Rotation3::new(Vector3::from(self.root_rotation)).to_homogeneous();
        Matrix4::new_translation(&Vector3::from(self.root_translation)) * r
    }
}

/// Pose parameters for both hands (index 0 = left).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub hands: [HandPose; 2],
}

impl Default for PoseParams {
    fn default() -> Self {
        PoseParams { hands: [HandPose::rest(), HandPose::rest()] }
    }
}

impl PoseParams {
    pub fn validate(&self, joints_per_hand: usize) -> Result<()> {
        for h in &self.hands {
            if h.theta.len() != 3 * joints_per_hand {
                return Err(Error::Shape(format!("theta has {} entries, rig needs {}", h.theta.len(), 3 * joints_per_hand)));
            }
            if h.beta.len() != BETA_DIM {
                return Err(Error::Shape(format!("beta has {} entries, expected {BETA_DIM}", h.beta.len())));
            }
            let finite = h.theta.iter().chain(&h.root_rotation).chain(&h.root_translation).all(|x| x.is_finite());
            if !finite {
                return Err(Error::Invalid("non-finite pose parameter".into()));
            }
            if h.beta.iter().any(|b| !(b.abs() <= BETA_BOUND)) {
                return Err(Error::Invalid(format!("beta outside [-{BETA_BOUND}, {BETA_BOUND}]")));
            }
        }
        Ok(())
    }

    /// Both hands' theta concatenated (left then right), as consumed by the pose encoder.
    pub fn theta_flat(&self) -> Vec<f64> {
        self.hands.iter().flat_map(|h| h.theta.iter().copied()).collect()
    }
}

/// Length and radius multipliers for one joint's bones.
///
/// beta[0] scales every bone length, beta[1..6] the five finger chains,
/// beta[6] every radius, beta[7] palm tubes, beta[8] finger tubes, beta[9] tip tubes.
fn shape_multipliers(rig: &SkeletonRig, pose: &PoseParams, joint: usize) -> (f64, f64) {
    let j = &rig.joints[joint];
    let beta = &pose.hands[j.side.index()].beta;
    let mut length = 1.0 + 0.04 * beta[0];
    if let Some(c) = j.chain {
        if c < 5 {
            length *= 1.0 + 0.04 * beta[1 + c];
        }
    }
    let own_palm = rig.bones.iter().any(|b| b.joint == joint && b.palm);
    let own_tip = rig.bones.iter().any(|b| b.joint == joint && b.tip);
    let mut radius = 1.0 + 0.05 * beta[6];
    radius *= if own_palm { 1.0 + 0.05 * beta[7] } else { 1.0 + 0.05 * beta[8] };
    if own_tip {
        radius *= 1.0 + 0.05 * beta[9];
    }
    (length, radius)
}

/// Joint positions after applying shape, plus the per-joint rest-space shape map.
fn shaped_rest(rig: &SkeletonRig, pose: &PoseParams) -> (Vec<Vector3<f64>>, Vec<Matrix4<f64>>) {
    let n = rig.joint_count();
    let mut joints: Vec<Vector3<f64>> = Vec::with_capacity(n);
    let mult: Vec<(f64, f64)> = (0..n).map(|j| shape_multipliers(rig, pose, j)).collect();
    for (i, j) in rig.joints.iter().enumerate() {
        let p = match j.parent {
            None => j.rest,
            Some(p) => joints[p] + (j.rest - rig.joints[p].rest) * mult[p].0,
        };
        joints.push(p);
        debug_assert!(i + 1 == joints.len());
    }
    let maps = (0..n)
        .map(|j| {
            let (l, r) = mult[j];
            let a = rig.axis[j];
            let aat = a * a.transpose();
            let k: Matrix3<f64> = aat * l + (Matrix3::identity() - aat) * r;
            Matrix4::new_translation(&joints[j]) * k.to_homogeneous() * Matrix4::new_translation(&-rig.joints[j].rest)
        })
        .collect();
    (joints, maps)
}

/// Global joint transforms `G_j` for the shaped, posed skeleton.
pub fn joint_transforms(rig: &SkeletonRig, pose: &PoseParams) -> Vec<Matrix4<f64>> {
    let (joints, _) = shaped_rest(rig, pose);
    let mut g: Vec<Matrix4<f64>> = Vec::with_capacity(rig.joint_count());
    for (i, j) in rig.joints.iter().enumerate() {
        let hand = &pose.hands[j.side.index()];
        let local = i - rig.hand_offset(j.side);
        let rot = Rotation3::new(Vector3::from(hand.joint_rotation(local))).to_homogeneous();
        let m = match j.parent {
            None => hand.root_matrix() * Matrix4::new_translation(&joints[i]) * rot,
            Some(p) => g[p] * Matrix4::new_translation(&(joints[i] - joints[p])) * rot,
        };
        g.push(m);
    }
    g
}

fn blend(row: &[f64], mats: &[Matrix4<f64>], p: &Vector3<f64>) -> Vector3<f64> {
    let mut out = Vector3::zeros();
    for (j, &w) in row.iter().enumerate() {
        if w != 0.0 {
            out += (mats[j] * p.push(1.0)).xyz() * w;
        }
    }
    out
}

/// Shape then pose the mesh by linear blend skinning. Connectivity, UVs and
/// weights are carried over unchanged.
pub fn pose_mesh(mesh: &HandMesh, rig: &SkeletonRig, pose: &PoseParams) -> Result<HandMesh> {
    if mesh.joint_count != rig.joint_count() {
        return Err(Error::Shape(format!(
            "mesh weights have {} columns, rig has {} joints",
            mesh.joint_count,
            rig.joint_count()
        )));
    }
    pose.validate(rig.joints_per_hand)?;
    let (shaped_joints, shape_maps) = shaped_rest(rig, pose);
    let g = joint_transforms(rig, pose);
    // skinning matrices: G_j * inverse(shaped bind)
    let skin: Vec<Matrix4<f64>> =
        g.iter().zip(&shaped_joints).map(|(g, j)| g * Matrix4::new_translation(&-j)).collect();
    let identity_shape = pose.hands.iter().all(|h| h.beta.iter().all(|&b| b == 0.0));
    let mut out = mesh.clone();
    for (v, slot) in out.vertices.iter_mut().enumerate() {
        let row = mesh.weight_row(v);
        let p = Vector3::from(mesh.vertices[v]);
        let shaped = if identity_shape { p } else { blend(row, &shape_maps, &p) };
        let q = blend(row, &skin, &shaped);
        *slot = [q.x, q.y, q.z];
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hand::mesh::build_mesh;
    use crate::hand::rig::{build_rig, RigSpec};

    fn setup() -> (SkeletonRig, HandMesh) {
        let spec = RigSpec::default_spec();
        let rig = build_rig(&spec).unwrap();
        let mesh = build_mesh(&rig, &spec);
        (rig, mesh)
    }

    #[test]
    fn rest_pose_is_identity() {
        let (rig, mesh) = setup();
        let posed = pose_mesh(&mesh, &rig, &PoseParams::default()).unwrap();
        for (a, b) in posed.vertices.iter().zip(&mesh.vertices) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn rigid_root_moves_everything_rigidly() {
        let (rig, mesh) = setup();
        let mut pose = PoseParams::default();
        let aa = [0.3, -0.7, 0.2];
        let t = [0.05, -0.02, 0.1];
        for h in &mut pose.hands {
            h.root_rotation = aa;
            h.root_translation = t;
        }
        let r = Rotation3::new(Vector3::from(aa));
        let posed = pose_mesh(&mesh, &rig, &pose).unwrap();
        for (a, b) in posed.vertices.iter().zip(&mesh.vertices) {
            let want = r * Vector3::from(*b) + Vector3::from(t);
            assert!((Vector3::from(*a) - want).norm() < 1e-9);
        }
    }

    #[test]
    fn single_weight_vertex_follows_its_joint() {
        let (rig, mut mesh) = setup();
        let j = 5; // middle2 of the left hand
        let v = 0;
        let row = &mut mesh.weights[v * mesh.joint_count..(v + 1) * mesh.joint_count];
        row.iter_mut().for_each(|w| *w = 0.0);
        row[j] = 1.0;
        let mut pose = PoseParams::default();
        pose.hands[0].set_joint_rotation(j, [0.0, 0.0, 0.8]);
        let posed = pose_mesh(&mesh, &rig, &pose).unwrap();
        // rigid transform of joint j: rotation about its rest position
        let c = rig.joints[j].rest;
        let r = Rotation3::new(Vector3::new(0.0, 0.0, 0.8));
        let want = r * (Vector3::from(mesh.vertices[v]) - c) + c;
        assert!((Vector3::from(posed.vertices[v]) - want).norm() < 1e-12);
    }

    #[test]
    fn weight_rig_mismatch_is_an_error() {
        let (rig, mut mesh) = setup();
        mesh.joint_count -= 1;
        assert!(matches!(pose_mesh(&mesh, &rig, &PoseParams::default()), Err(Error::Shape(_))));
    }

    #[test]
    fn beta_changes_shape_and_is_bounded() {
        let (rig, mesh) = setup();
        let mut pose = PoseParams::default();
        pose.hands[1].beta[0] = 2.0;
        let posed = pose_mesh(&mesh, &rig, &pose).unwrap();
        assert!(posed.vertices != mesh.vertices);
        pose.hands[1].beta[0] = 3.5;
        assert!(pose_mesh(&mesh, &rig, &pose).is_err());
    }
}
