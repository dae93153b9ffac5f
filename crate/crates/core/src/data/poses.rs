//! Procedural two-hand poses, including interacting configurations.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hand::{pose_mesh, HandModel, HandSide, PoseParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoseKind {
    /// Hands apart with random finger flexion.
    Apart,
    /// Hands slid together until the inner fingers meet.
    Touching,
    /// Fingers of the two hands crossing over each other.
    CrossedFingers,
    /// Palms turned towards each other and pressed together.
    PalmContact,
}

impl PoseKind {
    pub const ALL: [PoseKind; 4] = [PoseKind::Apart, PoseKind::Touching, PoseKind::CrossedFingers, PoseKind::PalmContact];

    pub fn is_interacting(self) -> bool {
        self != PoseKind::Apart
    }
}

/// Bends every finger joint towards the palm by a random angle.
fn flex_fingers<R: Rng>(model: &HandModel, pose: &mut PoseParams, rng: &mut R, max_angle: f64) {
    let rig = &model.rig;
    for side in [HandSide::Left, HandSide::Right] {
        let off = rig.hand_offset(side);
        for local in 0..rig.joints_per_hand {
            let j = &rig.joints[off + local];
            if j.parent.is_none() {
                continue;
            }
            let a = rng.random_range(0.0..max_angle);
            let aa = if j.name.starts_with("thumb") { [0.3 * a, 0.0, 0.0] } else { [a, 0.0, 0.0] };
            pose.hands[side.index()].set_joint_rotation(local, aa);
        }
    }
}

fn wrist(model: &HandModel, side: HandSide) -> [f64; 3] {
    let r = model.rig.root_of(side);
    let p = model.rig.joints[r].rest;
    [p.x, p.y, p.z]
}

/// Largest x of the left hand and smallest x of the right hand.
fn inner_extents(model: &HandModel, pose: &PoseParams) -> Result<(f64, f64)> {
    let mesh = model.canonical(0);
    let posed = pose_mesh(mesh, &model.rig, pose)?;
    let mut left = f64::MIN;
    let mut right = f64::MAX;
    for (p, s) in posed.vertices.iter().zip(&mesh.side) {
        match s {
            HandSide::Left => left = left.max(p[0]),
            HandSide::Right => right = right.min(p[0]),
        }
    }
    Ok((left, right))
}

/// Shifts both hands along x so their inner extents end `gap` apart
/// (negative gap means overlap).
fn close_gap(model: &HandModel, pose: &mut PoseParams, gap: f64) -> Result<()> {
    let (l, r) = inner_extents(model, pose)?;
    let shift = 0.5 * (r - l - gap);
    pose.hands[0].root_translation[0] += shift;
    pose.hands[1].root_translation[0] -= shift;
    Ok(())
}

/// Random pose of the given kind.
pub fn make_pose<R: Rng>(model: &HandModel, kind: PoseKind, rng: &mut R) -> Result<PoseParams> {
    let mut pose = PoseParams::default();
    let wl = wrist(model, HandSide::Left);
    let wr = wrist(model, HandSide::Right);
    match kind {
        PoseKind::Apart => {
            flex_fingers(model, &mut pose, rng, 0.6);
            let tilt = rng.random_range(-0.2..0.2);
            pose.hands[0].set_root_about([0.0, tilt, 0.0], wl, [rng.random_range(0.0..0.03), 0.0, 0.0]);
            pose.hands[1].set_root_about([0.0, -tilt, 0.0], wr, [-rng.random_range(0.0..0.03), 0.0, 0.0]);
        }
        PoseKind::Touching => {
            flex_fingers(model, &mut pose, rng, 0.3);
            close_gap(model, &mut pose, rng.random_range(-0.004..0.0))?;
        }
        PoseKind::CrossedFingers => {
            flex_fingers(model, &mut pose, rng, 0.2);
            let yaw = rng.random_range(0.35..0.6);
            pose.hands[0].set_root_about([0.0, yaw, 0.0], wl, [0.0, 0.0, 0.0]);
            pose.hands[1].set_root_about([0.0, -yaw, 0.0], wr, [0.0, 0.022, 0.0]);
            close_gap(model, &mut pose, -rng.random_range(0.04..0.07))?;
        }
        PoseKind::PalmContact => {
            flex_fingers(model, &mut pose, rng, 0.15);
            let roll = FRAC_PI_2 + rng.random_range(-0.1..0.1);
            pose.hands[0].set_root_about([0.0, 0.0, roll], wl, [0.0, 0.0, 0.0]);
            pose.hands[1].set_root_about([0.0, 0.0, -roll], wr, [0.0, 0.0, 0.0]);
            close_gap(model, &mut pose, rng.random_range(-0.003..0.0))?;
        }
    }
    if !pose.hands.iter().all(|h| h.root_translation.iter().all(|v| v.is_finite())) {
        return Err(Error::Invalid("pose construction produced a non-finite translation".into()));
    }
    Ok(pose)
}

/// A mix of poses: the first is always apart, the rest cycle through the
/// interacting kinds.
pub fn pose_schedule(n: usize) -> Vec<PoseKind> {
    (0..n).map(|i| if i == 0 { PoseKind::Apart } else { PoseKind::ALL[i % 4] }).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn poses_are_valid_and_deterministic() {
        let m = HandModel::default_model(0);
        for kind in PoseKind::ALL {
            let a = make_pose(&m, kind, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            let b = make_pose(&m, kind, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
            assert_eq!(a, b);
            a.validate(m.rig.joints_per_hand).unwrap();
        }
    }

    #[test]
    fn interacting_poses_bring_hands_together() {
        let m = HandModel::default_model(0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for kind in PoseKind::ALL {
            let pose = make_pose(&m, kind, &mut rng).unwrap();
            let d = pose_mesh(m.canonical(0), &m.rig, &pose).unwrap().min_inter_hand_distance();
            if kind.is_interacting() {
                assert!(d < 0.02, "{kind:?}: {d}");
            } else {
                assert!(d > 0.1, "{kind:?}: {d}");
            }
        }
    }
}
