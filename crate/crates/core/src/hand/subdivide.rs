//! Midpoint subdivision with UV and skinning-weight interpolation.

use std::collections::HashMap;

use nalgebra::Vector3;

use super::mesh::HandMesh;

/// A subdivided mesh plus, for every vertex, the index of the nearest vertex
/// of the input mesh (original vertices map to themselves).
#[derive(Debug, Clone)]
pub struct Subdivision {
    pub mesh: HandMesh,
    pub parent: Vec<u32>,
}

/// One subdivision step; parents refer to the input mesh.
pub fn subdivide_once(mesh: &HandMesh) -> Subdivision {
    let n = mesh.vertex_count();
    let jc = mesh.joint_count;
    let mut out = mesh.clone();
    out.faces = Vec::with_capacity(mesh.faces.len() * 4);
    let mut parent: Vec<u32> = (0..n as u32).collect();
    let mut midpoint: HashMap<(u32, u32), u32> = HashMap::new();

    // Edges are numbered in first-seen order so the output is deterministic.
    let mut mid = |a: u32, b: u32, out: &mut HandMesh, parent: &mut Vec<u32>| -> u32 {
        let key = (a.min(b), a.max(b));
        if let Some(&m) = midpoint.get(&key) {
            return m;
        }
        let (ia, ib) = (key.0 as usize, key.1 as usize);
        let pa = Vector3::from(mesh.vertices[ia]);
        let pb = Vector3::from(mesh.vertices[ib]);
        let p = (pa + pb) * 0.5;
        out.vertices.push([p.x, p.y, p.z]);
        out.uv.push([0.5 * (mesh.uv[ia][0] + mesh.uv[ib][0]), 0.5 * (mesh.uv[ia][1] + mesh.uv[ib][1])]);
        out.side.push(mesh.side[ia]);
        let ra = mesh.weight_row(ia);
        let rb = mesh.weight_row(ib);
        let mut row: Vec<f64> = ra.iter().zip(rb).map(|(x, y)| 0.5 * (x + y)).collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|w| *w /= s);
        out.weights.extend(row);
        let da = (p - pa).norm_squared();
        let db = (p - pb).norm_squared();
        parent.push(if db < da { key.1 } else { key.0 });
        let m = (out.vertices.len() - 1) as u32;
        midpoint.insert(key, m);
        m
    };
    for f in &mesh.faces {
        let [a, b, c] = *f;
        let ab = mid(a, b, &mut out, &mut parent);
        let bc = mid(b, c, &mut out, &mut parent);
        let ca = mid(c, a, &mut out, &mut parent);
        out.faces.push([a, ab, ca]);
        out.faces.push([ab, b, bc]);
        out.faces.push([ca, bc, c]);
        out.faces.push([ab, bc, ca]);
    }
    debug_assert_eq!(out.weights.len(), out.vertices.len() * jc);
    Subdivision { mesh: out, parent }
}

/// Subdivides `levels` times; parents refer to the input mesh.
pub fn subdivide(mesh: &HandMesh, levels: usize) -> Subdivision {
    let mut cur = Subdivision { mesh: mesh.clone(), parent: (0..mesh.vertex_count() as u32).collect() };
    for _ in 0..levels {
        let next = subdivide_once(&cur.mesh);
        let parent = next.parent.iter().map(|&p| cur.parent[p as usize]).collect();
        cur = Subdivision { mesh: next.mesh, parent };
    }
    cur
}

pub fn upsample_mesh(mesh: &HandMesh, levels: usize) -> HandMesh {
    subdivide(mesh, levels).mesh
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hand::mesh::{build_mesh, unique_edges};
    use crate::hand::rig::{build_rig, HandSide, RigSpec};

    fn default_mesh() -> HandMesh {
        let spec = RigSpec::default_spec();
        build_mesh(&build_rig(&spec).unwrap(), &spec)
    }

    fn patch() -> HandMesh {
        // a planar 2x2 quad patch with a two-joint weight gradient
        let mut vertices = Vec::new();
        let mut uv = Vec::new();
        let mut weights = Vec::new();
        for y in 0..3 {
            for x in 0..3 {
                vertices.push([x as f64 * 0.01, 0.0, y as f64 * 0.013]);
                uv.push([x as f64 / 2.0 * 0.4, y as f64 / 2.0]);
                let w = x as f64 / 2.0;
                weights.extend([1.0 - w, w]);
            }
        }
        let mut faces = Vec::new();
        for y in 0..2u32 {
            for x in 0..2u32 {
                let a = y * 3 + x;
                faces.push([a, a + 1, a + 3]);
                faces.push([a + 1, a + 4, a + 3]);
            }
        }
        HandMesh { vertices, faces, uv, weights, joint_count: 2, side: vec![HandSide::Left; 9] }
    }

    #[test]
    fn level_zero_is_identity() {
        let m = default_mesh();
        assert_eq!(upsample_mesh(&m, 0), m);
    }

    #[test]
    fn one_level_counts() {
        let m = default_mesh();
        let e = unique_edges(&m.faces).len();
        let s = upsample_mesh(&m, 1);
        assert_eq!(s.faces.len(), 4 * m.faces.len());
        assert_eq!(s.vertex_count(), m.vertex_count() + e);
        s.validate().unwrap();
    }

    #[test]
    fn weights_stay_on_simplex() {
        let s = upsample_mesh(&default_mesh(), 2);
        for v in 0..s.vertex_count() {
            let sum: f64 = s.weight_row(v).iter().sum();
            assert!((sum - 1.0).abs() <= 1e-6);
            assert!(s.weight_row(v).iter().all(|&w| w >= 0.0));
        }
    }

    #[test]
    fn planar_area_is_preserved() {
        let p = patch();
        let a0 = p.surface_area();
        let a1 = upsample_mesh(&p, 1).surface_area();
        let a2 = upsample_mesh(&p, 2).surface_area();
        assert!((a1 - a0).abs() / a0 <= 1e-6);
        assert!((a2 - a0).abs() / a0 <= 1e-6);
    }

    #[test]
    fn curved_area_never_grows() {
        let m = default_mesh();
        let a0 = m.surface_area();
        let a1 = upsample_mesh(&m, 1).surface_area();
        assert!(a1 <= a0 * (1.0 + 1e-12));
    }

    #[test]
    fn parents_point_at_an_edge_endpoint() {
        let m = default_mesh();
        let s = subdivide(&m, 1);
        for (v, &p) in s.parent.iter().enumerate() {
            if v < m.vertex_count() {
                assert_eq!(p as usize, v);
            } else {
                let a = Vector3::from(s.mesh.vertices[v]);
                let d = (a - Vector3::from(m.vertices[p as usize])).norm();
                assert!(d < 0.05);
            }
        }
    }
}
