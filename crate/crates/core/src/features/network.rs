//! Disentangled feature network: pose and geometry encoders, per-texel
//! texture decoder, UV sampling, fusion and interaction-gated attention.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::sample::{sample_query, MapShape};
use crate::error::{Error, Result};
use crate::graph::{Csr, Graph, SampleQuery, Tensor, Var};
use crate::hand::{HandMesh, HandSide};

/// Flattened camera length fed to the pose encoder.
pub const CAMERA_DIM: usize = 25;
/// Per-hand interaction summary length.
pub const SUMMARY_DIM: usize = 2;
/// Raw head outputs: offset 3, log-scale 3, quaternion 4, opacity 1, color 3, validity 1.
pub const HEAD_OUT: usize = 15;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    /// Feature width C.
    pub feature_dim: usize,
    /// Pose embedding width E.
    pub pose_dim: usize,
    /// Positional-encoding bands L.
    pub bands: usize,
    pub map_height: usize,
    pub map_width: usize,
    /// Hidden width of the encoder and decoder perceptrons.
    pub hidden: usize,
    pub head_hidden: usize,
    /// Length of the concatenated theta of both hands.
    pub theta_dim: usize,
    /// Largest Gaussian offset from its base position, in meters.
    pub offset_clamp: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            feature_dim: 32,
            pose_dim: 64,
            bands: 6,
            map_height: 64,
            map_width: 64,
            hidden: 64,
            head_hidden: 32,
            theta_dim: 96,
            offset_clamp: 0.005,
        }
    }
}

impl NetConfig {
    pub fn map_shape(&self) -> MapShape {
        MapShape { height: self.map_height, width: self.map_width }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.feature_dim, self.pose_dim, self.bands, self.map_height, self.map_width, self.hidden, self.head_hidden];
        if positive.contains(&0) {
            return Err(Error::Invalid("network widths must be positive".into()));
        }
        if !(self.offset_clamp > 0.0) {
            return Err(Error::Invalid("offset clamp must be positive".into()));
        }
        Ok(())
    }

    fn pose_input(&self) -> usize {
        self.theta_dim + CAMERA_DIM + SUMMARY_DIM
    }

    fn condition_width(&self) -> usize {
        2 * self.feature_dim + 4 * self.bands + self.pose_dim
    }

    /// Shapes of every network block, in checkpoint order.
    pub fn layer_shapes(&self) -> Vec<(String, usize, usize)> {
        let (c, e, h, hh) = (self.feature_dim, self.pose_dim, self.hidden, self.head_hidden);
        let mut v = Vec::new();
        let mut dense = |name: &str, i: usize, o: usize| {
            v.push((format!("{name}.w"), i, o));
            v.push((format!("{name}.b"), 1, o));
        };
        dense("pose.l1", self.pose_input(), h);
        dense("pose.l2", h, h);
        dense("pose.l3", h, e);
        dense("geo.l1", 6 * self.bands, c);
        dense("geo.l2", 2 * c + e, h);
        dense("geo.l3", h, c);
        dense("tex.l1", self.condition_width(), h);
        dense("tex.l2", h, h);
        dense("tex.l3", h, 2 * c);
        dense("head.l1", c, hh);
        dense("head.l2", hh, HEAD_OUT);
        for n in ["attn.q", "attn.k", "attn.v"] {
            v.push((n.to_string(), c, c));
        }
        v
    }

    /// Seeded Glorot-uniform weights and zero biases.
    pub fn init_weights(&self, seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, r, c) in self.layer_shapes() {
            let t = if name.ends_with(".b") {
                Tensor::zeros(r, c)
            } else {
                let a = (6.0 / (r + c) as f64).sqrt();
                Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-a..a)).collect())
            };
            store.insert(name, t);
        }
        store
    }

    /// A zero identity map (texel-major, 2C channels).
    pub fn zero_identity(&self) -> Tensor {
        Tensor::zeros(self.map_height * self.map_width, 2 * self.feature_dim)
    }

    /// A zero texture bias (texel-major, C channels).
    pub fn zero_texture_bias(&self) -> Tensor {
        Tensor::zeros(self.map_height * self.map_width, self.feature_dim)
    }

    /// Checks that every network block exists with the expected shape.
    pub fn check_weights(&self, store: &ParamStore) -> Result<()> {
        for (name, r, c) in self.layer_shapes() {
            let t = store.require(&name)?;
            if t.shape() != (r, c) {
                return Err(Error::Shape(format!("block `{name}` is {}x{}, expected {r}x{c}", t.rows, t.cols)));
            }
        }
        Ok(())
    }
}

pub fn identity_block(subject: usize) -> String {
    format!("identity.s{subject}")
}

/// Graph variables bound to parameter blocks.
#[derive(Debug, Clone, Default)]
pub struct Bound {
    entries: Vec<(String, Var)>,
}

impl Bound {
    /// Adds every block of `store` accepted by `select` to the graph;
    /// `trainable` decides which of them receive gradients.
    pub fn bind(g: &mut Graph, store: &ParamStore, select: impl Fn(&str) -> bool, trainable: impl Fn(&str) -> bool) -> Self {
        let mut entries = Vec::new();
        for (name, t) in store.iter() {
            if select(name) {
                entries.push((name.to_string(), g.leaf(t.clone(), trainable(name))));
            }
        }
        Bound { entries }
    }

    pub fn insert(&mut self, name: impl Into<String>, v: Var) {
        self.entries.push((name.into(), v));
    }

    pub fn get(&self, name: &str) -> Var {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .unwrap_or_else(|| panic!("parameter block `{name}` was not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| *v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.entries.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

pub(crate) fn dense(g: &mut Graph, b: &Bound, name: &str, x: Var) -> Var {
    let w = b.get(&format!("{name}.w"));
    let bias = b.get(&format!("{name}.b"));
    let y = g.matmul(x, w);
    g.add_bias(y, bias)
}

/// NeRF-style encoding of a plain vector.
pub fn gamma_encode(x: &[f64], bands: usize) -> Vec<f64> {
    let mut out = vec![0.0; 2 * bands * x.len()];
    for (c, &v) in x.iter().enumerate() {
        crate::graph::gamma_into(v, bands, &mut out[2 * bands * c..2 * bands * (c + 1)]);
    }
    out
}

/// Pose embedding from both hands' theta, the flattened camera and the
/// per-hand interaction summary. Shape is deliberately not an input.
pub fn encode_pose(g: &mut Graph, b: &Bound, cfg: &NetConfig, theta: &[f64], camera: &[f64], summary: [f64; 2]) -> Result<Var> {
    if theta.len() != cfg.theta_dim || camera.len() != CAMERA_DIM {
        return Err(Error::Shape(format!(
            "pose encoder takes {} theta and {CAMERA_DIM} camera entries, got {} and {}",
            cfg.theta_dim,
            theta.len(),
            camera.len()
        )));
    }
    let mut row = theta.to_vec();
    row.extend_from_slice(camera);
    row.extend_from_slice(&summary);
    let x = g.constant(Tensor::row_vector(row));
    Ok(encode_pose_var(g, b, x))
}

pub(crate) fn encode_pose_var(g: &mut Graph, b: &Bound, x: Var) -> Var {
    let h = dense(g, b, "pose.l1", x);
    let h = g.tanh(h);
    let h = dense(g, b, "pose.l2", h);
    let h = g.tanh(h);
    let h = dense(g, b, "pose.l3", h);
    g.tanh(h)
}

/// Per-point geometric features: encoded position, its neighbourhood mean,
/// and the broadcast pose embedding, fused by a small perceptron.
pub fn encode_geometry(g: &mut Graph, b: &Bound, cfg: &NetConfig, positions: Var, nbrs: &Arc<Csr>, pose_emb: Var) -> Result<Var> {
    let n = g.value(positions).rows;
    if g.value(positions).cols != 3 || nbrs.len() != n {
        return Err(Error::Shape(format!("{n} positions against {} neighbourhoods", nbrs.len())));
    }
    let enc = g.gamma(positions, cfg.bands);
    let h = dense(g, b, "geo.l1", enc);
    let h = g.tanh(h);
    let pooled = g.neighbor_mean(h, nbrs.clone());
    let pe = g.broadcast_rows(pose_emb, n);
    let z = g.concat_cols(&[h, pooled, pe]);
    let z = dense(g, b, "geo.l2", z);
    let z = g.tanh(z);
    Ok(dense(g, b, "geo.l3", z))
}

/// Mesh-dependent lookups for the texture decoder, computed once per mesh.
#[derive(Debug, Clone)]
pub struct TexturePlan {
    pub shape: MapShape,
    /// Identity-map lookups at each vertex uv (all 2C channels).
    pub queries: Arc<Vec<SampleQuery>>,
    /// Positional encoding of each vertex uv.
    pub uv_encoding: Tensor,
    /// `(texel, vertex)` pairs; a texel hit by several vertices keeps the highest vertex id.
    pub scatter: Arc<Vec<(u32, u32)>>,
}

impl TexturePlan {
    pub fn new(cfg: &NetConfig, mesh: &HandMesh) -> Result<Self> {
        let shape = cfg.map_shape();
        let mut queries = Vec::with_capacity(mesh.uv.len());
        let mut enc = Tensor::zeros(mesh.uv.len(), 4 * cfg.bands);
        let mut owner: Vec<Option<u32>> = vec![None; shape.texels()];
        for (v, uv) in mesh.uv.iter().enumerate() {
            queries.push(sample_query(shape, *uv, 0)?);
            enc.row_mut(v).copy_from_slice(&gamma_encode(uv, cfg.bands));
            // ascending vertex order: the last writer wins
            owner[shape.nearest_texel(*uv) as usize] = Some(v as u32);
        }
        let scatter = owner.iter().enumerate().filter_map(|(t, o)| o.map(|v| (t as u32, v))).collect();
        Ok(TexturePlan { shape, queries: Arc::new(queries), uv_encoding: enc, scatter: Arc::new(scatter) })
    }
}

/// Decodes the neural texture map `t` (texels x 2C) from an identity slice.
pub fn decode_texture(g: &mut Graph, b: &Bound, cfg: &NetConfig, identity: Var, pose_emb: Var, plan: &TexturePlan) -> Result<Var> {
    let (rows, cols) = g.value(identity).shape();
    if rows != plan.shape.texels() || cols != 2 * cfg.feature_dim {
        return Err(Error::Shape(format!("identity map is {rows}x{cols}, expected {}x{}", plan.shape.texels(), 2 * cfg.feature_dim)));
    }
    let n = plan.queries.len();
    let id = g.sample(identity, plan.queries.clone(), cols);
    let enc = g.constant(plan.uv_encoding.clone());
    let pe = g.broadcast_rows(pose_emb, n);
    let per_vertex = g.concat_cols(&[id, enc, pe]);
    let cond = g.scatter_rows(per_vertex, plan.scatter.clone(), plan.shape.texels());
    let h = dense(g, b, "tex.l1", cond);
    let h = g.tanh(h);
    let h = dense(g, b, "tex.l2", h);
    let h = g.tanh(h);
    Ok(dense(g, b, "tex.l3", h))
}

/// Adds a C-channel bias map to both channel halves of a texture map.
pub fn add_texture_bias(g: &mut Graph, t: Var, bias: Var) -> Var {
    let both = g.concat_cols(&[bias, bias]);
    g.add(t, both)
}

/// Per-point lookups into the texture map, reading the channel half of each point's hand.
pub fn point_queries(cfg: &NetConfig, uv: &[[f64; 2]], sides: &[HandSide]) -> Result<Arc<Vec<SampleQuery>>> {
    let shape = cfg.map_shape();
    let q = uv
        .iter()
        .zip(sides)
        .map(|(uv, s)| sample_query(shape, *uv, s.index() * cfg.feature_dim))
        .collect::<Result<Vec<_>>>()?;
    Ok(Arc::new(q))
}

pub fn sample_points(g: &mut Graph, cfg: &NetConfig, t: Var, queries: &Arc<Vec<SampleQuery>>) -> Var {
    g.sample(t, queries.clone(), cfg.feature_dim)
}

pub fn fuse_features(g: &mut Graph, geometric: Var, textural: Var) -> Result<Var> {
    if g.value(geometric).shape() != g.value(textural).shape() {
        return Err(Error::Shape("geometric and textural features differ in shape".into()));
    }
    Ok(g.add(geometric, textural))
}

/// Single-head self-attention over the flagged rows only, with a residual
/// connection. Unflagged rows are passed through untouched.
pub fn interaction_attention(g: &mut Graph, b: &Bound, f: Var, flagged: &[u32]) -> Var {
    if flagged.is_empty() {
        return f;
    }
    let c = g.value(f).cols;
    let rows = Arc::new(flagged.to_vec());
    let x = g.gather_rows(f, rows.clone());
    let q = g.matmul(x, b.get("attn.q"));
    let k = g.matmul(x, b.get("attn.k"));
    let v = g.matmul(x, b.get("attn.v"));
    let s = g.matmul_nt(q, k);
    let s = g.scale(s, 1.0 / (c as f64).sqrt());
    let a = g.softmax_rows(s);
    let o = g.matmul(a, v);
    let out = g.add(x, o);
    g.replace_rows(f, rows, out)
}
