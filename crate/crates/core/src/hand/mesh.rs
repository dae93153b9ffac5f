//! Triangle meshes for the two-hand rig: tube generation, UV packing, skinning weights.

use std::fmt::Write as _;

use nalgebra::Vector3;

use super::rig::{Bone, HandSide, RigSpec, SkeletonRig};
use crate::error::{Error, Result};

/// Joints kept per vertex after the distance falloff.
const MAX_INFLUENCES: usize = 4;
/// Padding inside each UV cell, in UV units.
const UV_MARGIN: f64 = 0.004;

#[derive(Debug, Clone, PartialEq)]
pub struct HandMesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[u32; 3]>,
    pub uv: Vec<[f64; 2]>,
    /// Row-major `V x J` skinning weights.
    pub weights: Vec<f64>,
    pub joint_count: usize,
    pub side: Vec<HandSide>,
}

impl HandMesh {
    pub fn vertex_count(&self) -> usize {
        self.vertices.len()
    }

    pub fn weight_row(&self, v: usize) -> &[f64] {
        &self.weights[v * self.joint_count..(v + 1) * self.joint_count]
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.vertices.len();
        if self.uv.len() != n || self.side.len() != n || self.weights.len() != n * self.joint_count {
            return Err(Error::Shape("per-vertex arrays disagree in length".into()));
        }
        for f in &self.faces {
            if f.iter().any(|&i| i as usize >= n) {
                return Err(Error::Invalid(format!("face {f:?} indexes past {n} vertices")));
            }
        }
        for v in 0..n {
            let row = self.weight_row(v);
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Invalid(format!("vertex {v} skinning weights sum to {sum}")));
            }
            let [u, t] = self.uv[v];
            if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&t) {
                return Err(Error::UvOutOfRange { u, v: t });
            }
        }
        Ok(())
    }

    pub fn surface_area(&self) -> f64 {
        self.faces
            .iter()
            .map(|f| {
                let a = Vector3::from(self.vertices[f[0] as usize]);
                let b = Vector3::from(self.vertices[f[1] as usize]);
                let c = Vector3::from(self.vertices[f[2] as usize]);
                0.5 * (b - a).cross(&(c - a)).norm()
            })
            .sum()
    }

    /// Smallest distance between a left-hand vertex and a right-hand vertex.
    pub fn min_inter_hand_distance(&self) -> f64 {
        let (left, right): (Vec<_>, Vec<_>) =
            (0..self.vertex_count()).partition(|&i| self.side[i] == HandSide::Left);
        let mut best = f64::INFINITY;
        for &i in &left {
            let a = Vector3::from(self.vertices[i]);
            for &j in &right {
                best = best.min((a - Vector3::from(self.vertices[j])).norm());
            }
        }
        best
    }

    /// Vertex 1-rings (each list starts with the vertex itself, then ascending neighbours).
    pub fn one_rings(&self) -> Vec<Vec<u32>> {
        let mut rings: Vec<Vec<u32>> = (0..self.vertex_count() as u32).map(|i| vec![i]).collect();
        for f in &self.faces {
            for k in 0..3 {
                let a = f[k] as usize;
                for l in 0..3 {
                    if l != k {
                        rings[a].push(f[l]);
                    }
                }
            }
        }
        for r in &mut rings {
            let head = r[0];
            r[1..].sort_unstable();
            r.dedup();
            r.retain(|&x| x != head);
            r.insert(0, head);
        }
        rings
    }

    /// ASCII OBJ with `v`, `vt` and `f` records. Optional per-vertex RGB is
    /// appended to each `v` line.
    pub fn to_obj(&self, colors: Option<&[[f64; 3]]>) -> String {
        let mut out = String::new();
        for (i, v) in self.vertices.iter().enumerate() {
            match colors {
                Some(c) => {
                    let c = c[i];
                    let _ = writeln!(out, "v {} {} {} {} {} {}", v[0], v[1], v[2], c[0], c[1], c[2]);
                }
                None => {
                    let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
                }
            }
        }
        for t in &self.uv {
            let _ = writeln!(out, "vt {} {}", t[0], t[1]);
        }
        for f in &self.faces {
            let (a, b, c) = (f[0] + 1, f[1] + 1, f[2] + 1);
            let _ = writeln!(out, "f {a}/{a} {b}/{b} {c}/{c}");
        }
        out
    }
}

fn perpendicular_frame(axis: &Vector3<f64>) -> (Vector3<f64>, Vector3<f64>) {
    // Prefer +y as the "up" seed so palm-down tubes start their seam on top.
    let seed = if axis.y.abs() < 0.9 { Vector3::y() } else { Vector3::x() };
    let e1 = (seed - axis * axis.dot(&seed)).normalize();
    let e2 = axis.cross(&e1);
    (e1, e2)
}

fn point_segment_distance(p: &Vector3<f64>, a: &Vector3<f64>, b: &Vector3<f64>) -> f64 {
    let ab = b - a;
    let t = ((p - a).dot(&ab) / ab.norm_squared()).clamp(0.0, 1.0);
    (p - (a + ab * t)).norm()
}

/// Skinning row for a point owned by `own` bone: inverse-distance falloff to
/// every bone of the same hand, aggregated per driving joint, truncated to the
/// strongest [`MAX_INFLUENCES`] joints and renormalised.
fn skin_row(p: &Vector3<f64>, own: &Bone, bones: &[Bone], joint_count: usize) -> Vec<f64> {
    let mut acc = vec![0.0; joint_count];
    for b in bones.iter().filter(|b| b.side == own.side) {
        let d = point_segment_distance(p, &b.start, &b.end) / own.radius.max(1e-6);
        acc[b.joint] += 1.0 / (1e-6 + d.powi(6));
    }
    let mut ranked: Vec<usize> = (0..joint_count).filter(|&j| acc[j] > 0.0).collect();
    ranked.sort_by(|&a, &b| acc[b].total_cmp(&acc[a]).then(a.cmp(&b)));
    ranked.truncate(MAX_INFLUENCES);
    let total: f64 = ranked.iter().map(|&j| acc[j]).sum();
    let mut row = vec![0.0; joint_count];
    for &j in &ranked {
        row[j] = acc[j] / total;
    }
    row
}

/// Tube-and-cap mesh around every bone. UVs: each hand owns one half of the
/// texture plane (left `u < 0.5`), subdivided into one cell per bone.
pub fn build_mesh(rig: &SkeletonRig, spec: &RigSpec) -> HandMesh {
    let seg = spec.radial_segments;
    let rings = spec.rings_per_bone;
    let jc = rig.joint_count();
    let per_hand_bones = rig.bones.iter().filter(|b| b.side == HandSide::Left).count().max(1);
    let cols = (per_hand_bones as f64).sqrt().ceil() as usize;
    let rows = per_hand_bones.div_ceil(cols);
    let cell_w = 0.5 / cols as f64;
    let cell_h = 1.0 / rows as f64;

    let mut mesh = HandMesh {
        vertices: Vec::new(),
        faces: Vec::new(),
        uv: Vec::new(),
        weights: Vec::new(),
        joint_count: jc,
        side: Vec::new(),
    };
    let mut slot_in_hand = [0usize; 2];
    for bone in &rig.bones {
        let hand = bone.side.index();
        let slot = slot_in_hand[hand];
        slot_in_hand[hand] += 1;
        let u0 = 0.5 * hand as f64 + (slot % cols) as f64 * cell_w + UV_MARGIN;
        let v0 = (slot / cols) as f64 * cell_h + UV_MARGIN;
        let uw = cell_w - 2.0 * UV_MARGIN;
        let vh = cell_h - 2.0 * UV_MARGIN;
        // mirrored hands have reversed winding
        let mirrored = bone.side == HandSide::Right;

        let axis_vec = bone.end - bone.start;
        let axis = axis_vec.normalize();
        let (e1, e2) = perpendicular_frame(&axis);
        let base = mesh.vertices.len() as u32;
        let push = |p: Vector3<f64>, uv: [f64; 2], mesh: &mut HandMesh| {
            mesh.vertices.push([p.x, p.y, p.z]);
            mesh.uv.push(uv);
            mesh.side.push(bone.side);
            mesh.weights.extend(skin_row(&p, bone, &rig.bones, jc));
        };
        let levels = rings + 2;
        for r in 0..=rings {
            let t = r as f64 / rings as f64;
            let c = bone.start + axis_vec * t;
            for k in 0..seg {
                let phi = std::f64::consts::TAU * k as f64 / seg as f64;
                let p = c + (e1 * phi.cos() + e2 * phi.sin()) * bone.radius;
                let uv = [u0 + uw * (k as f64 + 0.5) / seg as f64, v0 + vh * (r + 1) as f64 / levels as f64];
                push(p, uv, &mut mesh);
            }
        }
        let cap_lo = base + ((rings + 1) * seg) as u32;
        push(bone.start - axis * (0.5 * bone.radius), [u0 + 0.5 * uw, v0], &mut mesh);
        push(bone.end + axis * (0.5 * bone.radius), [u0 + 0.5 * uw, v0 + vh], &mut mesh);
        let cap_hi = cap_lo + 1;

        let idx = |r: usize, k: usize| base + (r * seg + k % seg) as u32;
        let mut tri = |a: u32, b: u32, c: u32| {
            mesh.faces.push(if mirrored { [a, c, b] } else { [a, b, c] });
        };
        for r in 0..rings {
            for k in 0..seg {
                let (a, b, c, d) = (idx(r, k), idx(r, k + 1), idx(r + 1, k), idx(r + 1, k + 1));
                tri(a, c, b);
                tri(b, c, d);
            }
        }
        for k in 0..seg {
            tri(cap_lo, idx(0, k), idx(0, k + 1));
            tri(cap_hi, idx(rings, k + 1), idx(rings, k));
        }
    }
    mesh
}

/// Unique undirected edges, sorted.
pub fn unique_edges(faces: &[[u32; 3]]) -> Vec<(u32, u32)> {
    let mut edges: Vec<(u32, u32)> = faces
        .iter()
        .flat_map(|f| [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])])
        .map(|(a, b)| if a < b { (a, b) } else { (b, a) })
        .collect();
    edges.sort_unstable();
    edges.dedup();
    edges
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hand::rig::build_rig;

    fn default_mesh() -> HandMesh {
        let spec = RigSpec::default_spec();
        let rig = build_rig(&spec).unwrap();
        build_mesh(&rig, &spec)
    }

    #[test]
    fn default_mesh_is_valid() {
        let m = default_mesh();
        m.validate().unwrap();
        assert_eq!(m.vertex_count(), 40 * (4 * 8 + 2));
    }

    #[test]
    fn uv_halves_are_disjoint() {
        let m = default_mesh();
        for (uv, side) in m.uv.iter().zip(&m.side) {
            match side {
                HandSide::Left => assert!(uv[0] < 0.5),
                HandSide::Right => assert!(uv[0] >= 0.5),
            }
        }
    }

    #[test]
    fn hands_are_interaction_free_in_canonical_pose() {
        let m = default_mesh();
        assert!(m.min_inter_hand_distance() > 0.1, "{}", m.min_inter_hand_distance());
    }

    #[test]
    fn every_tube_is_closed() {
        // Each edge of a closed surface is shared by exactly two faces.
        let m = default_mesh();
        let mut count = std::collections::HashMap::new();
        for f in &m.faces {
            for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
                *count.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        assert!(count.values().all(|&c| c == 2));
    }

    #[test]
    fn obj_export_has_all_records() {
        let m = default_mesh();
        let obj = m.to_obj(None);
        assert_eq!(obj.lines().filter(|l| l.starts_with("v ")).count(), m.vertex_count());
        assert_eq!(obj.lines().filter(|l| l.starts_with("vt ")).count(), m.vertex_count());
        assert_eq!(obj.lines().filter(|l| l.starts_with("f ")).count(), m.faces.len());
    }
}
