//! Procedural two-hand skeleton and the rig-spec file that describes it.

use std::collections::HashMap;

use nalgebra::{Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const RIG_VERSION: u32 = 1;

/// The rig shipped with the crate.
pub const DEFAULT_RIG_SPEC: &str = include_str!("../../assets/default_rig.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HandSide {
    Left,
    Right,
}

impl HandSide {
    /// 0 for left, 1 for right. Used to pick channel halves and UV halves.
    pub fn index(self) -> usize {
        match self {
            HandSide::Left => 0,
            HandSide::Right => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        if i == 0 {
            HandSide::Left
        } else {
            HandSide::Right
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HandPlacement {
    pub side: HandSide,
    pub wrist: [f64; 3],
    #[serde(default)]
    pub mirror: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JointSpec {
    pub name: String,
    #[serde(default)]
    pub parent: Option<String>,
    pub offset: [f64; 3],
    /// Radius of the tube running from the parent joint to this one.
    pub radius: f64,
    /// End effector offset for leaf joints; produces one extra tube.
    #[serde(default)]
    pub tip: Option<[f64; 3]>,
    #[serde(default)]
    pub tip_radius: Option<f64>,
}

/// Parsed rig-spec file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RigSpec {
    pub rig_version: u32,
    pub radial_segments: usize,
    pub rings_per_bone: usize,
    #[serde(rename = "hand")]
    pub hands: Vec<HandPlacement>,
    #[serde(rename = "joint")]
    pub joints: Vec<JointSpec>,
}

impl RigSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let spec: RigSpec = toml::from_str(text)?;
        if spec.rig_version != RIG_VERSION {
            return Err(Error::Version { kind: "rig spec", found: spec.rig_version, expected: RIG_VERSION });
        }
        Ok(spec)
    }

    pub fn default_spec() -> Self {
        Self::parse(DEFAULT_RIG_SPEC).expect("shipped rig spec parses")
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[derive(Debug, Clone)]
pub struct Joint {
    pub name: String,
    pub rest: Vector3<f64>,
    pub parent: Option<usize>,
    pub side: HandSide,
    /// Index of the finger chain (child of the root) this joint belongs to; `None` for roots.
    pub chain: Option<usize>,
}

/// A tube segment driven by one joint.
#[derive(Debug, Clone)]
pub struct Bone {
    pub joint: usize,
    pub start: Vector3<f64>,
    pub end: Vector3<f64>,
    pub radius: f64,
    pub side: HandSide,
    /// True for tubes hanging off a root (the palm).
    pub palm: bool,
    /// True for end-effector tubes.
    pub tip: bool,
}

#[derive(Debug, Clone)]
pub struct SkeletonRig {
    pub joints: Vec<Joint>,
    pub joints_per_hand: usize,
    pub bones: Vec<Bone>,
    /// Rest-pose joint transforms (translation only; rest frames are world aligned).
    pub bind: Vec<Matrix4<f64>>,
    /// Unit bone direction used for radial shape scaling, per joint.
    pub axis: Vec<Vector3<f64>>,
}

impl SkeletonRig {
    pub fn joint_count(&self) -> usize {
        self.joints.len()
    }

    pub fn roots(&self) -> Vec<usize> {
        self.joints.iter().enumerate().filter(|(_, j)| j.parent.is_none()).map(|(i, _)| i).collect()
    }

    pub fn root_of(&self, side: HandSide) -> usize {
        self.joints
            .iter()
            .position(|j| j.parent.is_none() && j.side == side)
            .expect("rig has one root per hand")
    }

    /// Index of the first joint of a hand; joints of each hand are contiguous.
    pub fn hand_offset(&self, side: HandSide) -> usize {
        side.index() * self.joints_per_hand
    }

    pub fn validate(&self) -> Result<()> {
        let mut roots = 0;
        for (i, j) in self.joints.iter().enumerate() {
            if !j.rest.iter().all(|x| x.is_finite()) {
                return Err(Error::Joint { joint: j.name.clone(), reason: "non-finite rest position".into() });
            }
            match j.parent {
                None => roots += 1,
                Some(p) if p >= i => {
                    return Err(Error::Joint { joint: j.name.clone(), reason: "parent after child".into() });
                }
                Some(p) if self.joints[p].side != j.side => {
                    return Err(Error::Joint { joint: j.name.clone(), reason: "parent on the other hand".into() });
                }
                _ => {}
            }
        }
        if roots != 2 {
            return Err(Error::RigSpec(format!("expected two roots, found {roots}")));
        }
        Ok(())
    }
}

/// Orders the template joints so parents precede children; rejects cycles.
fn topo_order(spec: &RigSpec) -> Result<Vec<usize>> {
    let mut by_name = HashMap::new();
    for (i, j) in spec.joints.iter().enumerate() {
        if by_name.insert(j.name.as_str(), i).is_some() {
            return Err(Error::Joint { joint: j.name.clone(), reason: "duplicate joint name".into() });
        }
    }
    let mut parent = Vec::with_capacity(spec.joints.len());
    for j in &spec.joints {
        match &j.parent {
            None => parent.push(None),
            Some(p) if p.is_empty() => parent.push(None),
            Some(p) => match by_name.get(p.as_str()) {
                Some(&pi) => parent.push(Some(pi)),
                None => {
                    return Err(Error::Joint { joint: j.name.clone(), reason: format!("unknown parent `{p}`") });
                }
            },
        }
    }
    // 0 = unvisited, 1 = on stack, 2 = done
    let mut state = vec![0u8; spec.joints.len()];
    let mut order = Vec::with_capacity(spec.joints.len());
    for start in 0..spec.joints.len() {
        let mut chain = Vec::new();
        let mut cur = Some(start);
        while let Some(c) = cur {
            match state[c] {
                2 => break,
                1 => {
                    return Err(Error::Joint {
                        joint: spec.joints[c].name.clone(),
                        reason: "cycle in joint tree".into(),
                    })
                }
                _ => {
                    state[c] = 1;
                    chain.push(c);
                    cur = parent[c];
                }
            }
        }
        for &c in chain.iter().rev() {
            state[c] = 2;
            order.push(c);
        }
    }
    Ok(order)
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

/// Builds the two-hand skeleton described by `spec` (meshing lives in [`super::mesh`]).
pub fn build_rig(spec: &RigSpec) -> Result<SkeletonRig> {
    if spec.radial_segments < 3 {
        return Err(Error::RigSpec("radial_segments must be at least 3".into()));
    }
    if spec.rings_per_bone < 1 {
        return Err(Error::RigSpec("rings_per_bone must be at least 1".into()));
    }
    if spec.hands.len() != 2 || spec.hands[0].side == spec.hands[1].side {
        return Err(Error::RigSpec("expected exactly one left and one right hand".into()));
    }
    let order = topo_order(spec)?;
    let template_roots = spec.joints.iter().filter(|j| j.parent.as_deref().map_or(true, str::is_empty)).count();
    if template_roots != 1 {
        return Err(Error::RigSpec(format!("hand template needs exactly one root, found {template_roots}")));
    }
    for j in &spec.joints {
        let is_root = j.parent.as_deref().map_or(true, str::is_empty);
        let len = vec3(j.offset).norm();
        if !is_root && !(len > 0.0) {
            return Err(Error::Joint { joint: j.name.clone(), reason: "nonpositive bone length".into() });
        }
        if !is_root && !(j.radius > 0.0) {
            return Err(Error::Joint { joint: j.name.clone(), reason: "nonpositive tube radius".into() });
        }
        if let Some(t) = j.tip {
            if !(vec3(t).norm() > 0.0) {
                return Err(Error::Joint { joint: j.name.clone(), reason: "nonpositive tip length".into() });
            }
            if !(j.tip_radius.unwrap_or(j.radius) > 0.0) {
                return Err(Error::Joint { joint: j.name.clone(), reason: "nonpositive tip radius".into() });
            }
        }
    }

    // Hands are emitted left first so joint indices are contiguous per hand.
    let mut placements: Vec<&HandPlacement> = spec.hands.iter().collect();
    placements.sort_by_key(|h| h.side.index());

    let per_hand = spec.joints.len();
    let mut joints: Vec<Joint> = Vec::with_capacity(2 * per_hand);
    let mut bones = Vec::new();
    for hand in placements {
        let base = joints.len();
        let flip = if hand.mirror { -1.0 } else { 1.0 };
        let local = |a: [f64; 3]| Vector3::new(flip * a[0], a[1], a[2]);
        // template index -> rig index
        let mut slot = vec![usize::MAX; per_hand];
        for (k, &ti) in order.iter().enumerate() {
            slot[ti] = base + k;
        }
        let mut chain_of = vec![None; per_hand];
        let mut next_chain = 0;
        for &ti in &order {
            let js = &spec.joints[ti];
            let parent_t = js.parent.as_deref().filter(|p| !p.is_empty()).map(|p| {
                spec.joints.iter().position(|o| o.name == p).expect("validated parent")
            });
            let (rest, parent, chain) = match parent_t {
                None => (vec3(hand.wrist) + local(js.offset), None, None),
                Some(pt) => {
                    let p = slot[pt];
                    let chain = match chain_of[pt] {
                        Some(c) => c,
                        None => {
                            next_chain += 1;
                            next_chain - 1
                        }
                    };
                    chain_of[ti] = Some(chain);
                    let prest = joints[p].rest;
                    (prest + local(js.offset), Some(p), Some(chain))
                }
            };
            joints.push(Joint { name: js.name.clone(), rest, parent, side: hand.side, chain });
            if let Some(p) = parent {
                bones.push(Bone {
                    joint: p,
                    start: joints[p].rest,
                    end: rest,
                    radius: js.radius,
                    side: hand.side,
                    palm: joints[p].parent.is_none(),
                    tip: false,
                });
            }
            if let Some(t) = js.tip {
                bones.push(Bone {
                    joint: joints.len() - 1,
                    start: rest,
                    end: rest + local(t),
                    radius: js.tip_radius.unwrap_or(js.radius),
                    side: hand.side,
                    palm: false,
                    tip: true,
                });
            }
        }
    }

    let bind = joints.iter().map(|j| Matrix4::new_translation(&j.rest)).collect();
    let axis = (0..joints.len())
        .map(|ji| {
            let own: Vec<&Bone> = bones.iter().filter(|b| b.joint == ji).collect();
            let sum: Vector3<f64> = own.iter().map(|b| (b.end - b.start).normalize()).sum();
            if own.is_empty() || sum.norm() < 1e-12 {
                Vector3::z()
            } else {
                sum.normalize()
            }
        })
        .collect();
    let rig = SkeletonRig { joints, joints_per_hand: per_hand, bones, bind, axis };
    rig.validate()?;
    Ok(rig)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_rig_has_sixteen_joints_per_hand() {
        let rig = build_rig(&RigSpec::default_spec()).unwrap();
        assert_eq!(rig.joint_count(), 32);
        assert_eq!(rig.joints_per_hand, 16);
        assert_eq!(rig.roots().len(), 2);
        assert_eq!(rig.bones.len(), 40);
        for (i, j) in rig.joints.iter().enumerate() {
            if let Some(p) = j.parent {
                assert!(p < i);
            }
        }
    }

    #[test]
    fn cycle_is_rejected_with_joint_name() {
        let mut spec = RigSpec::default_spec();
        // index1 -> index3 -> index2 -> index1
        spec.joints[1].parent = Some("index3".into());
        let err = build_rig(&spec).unwrap_err();
        match err {
            Error::Joint { joint, reason } => {
                assert!(reason.contains("cycle"));
                assert!(joint.starts_with("index"), "{joint}");
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn zero_length_bone_is_rejected() {
        let mut spec = RigSpec::default_spec();
        spec.joints[2].offset = [0.0; 3];
        let err = build_rig(&spec).unwrap_err();
        assert!(matches!(err, Error::Joint { ref joint, .. } if joint == "index2"), "{err}");
    }

    #[test]
    fn unknown_version_is_rejected() {
        let text = DEFAULT_RIG_SPEC.replace("rig_version = 1", "rig_version = 7");
        assert!(matches!(RigSpec::parse(&text), Err(Error::Version { found: 7, .. })));
    }
}
