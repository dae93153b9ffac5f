//! The animatable avatar: per-level caches, the differentiable forward pass
//! from pose to Gaussians, and the loss/backward plumbing shared by both
//! optimization stages.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::losses::{l1, mse, LossWeights, Perceptual};
use crate::error::{Error, Result};
use crate::features::{
    add_texture_bias, decode_texture, encode_geometry, fuse_features, interaction_attention, point_queries, sample_points,
    Bound, NetConfig, ParamStore, TexturePlan,
};
use crate::gaussians::{predict_attributes, AttrVars, GaussianCloud, PointMeta, RefinePlan, RefinementConfig};
use crate::graph::{Csr, Gradients, Graph, SampleQuery, Tensor, Var};
use crate::hand::mesh::unique_edges;
use crate::hand::{pose_mesh, HandModel, PoseParams};
use crate::interaction::{detect_interactions, inherit_from_parents, DetectionConfig, InteractionLabels};
use crate::raster::{render, render_backward, Camera, RenderedImage};

/// Base Gaussian standard deviation as a fraction of the mean mesh edge.
pub const BASE_SCALE_FRACTION: f64 = 0.6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub net: NetConfig,
    pub detection: DetectionConfig,
    pub refinement: RefinementConfig,
    /// Mesh level the interaction detector runs on; finer clouds inherit labels.
    pub detect_level: usize,
    pub attention: bool,
    pub background: [f64; 3],
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            net: NetConfig::default(),
            detection: DetectionConfig::default(),
            refinement: RefinementConfig::default(),
            detect_level: 1,
            attention: true,
            background: [0.0; 3],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.refinement.validate()?;
        if self.background.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::Invalid("background must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Everything about one cloud level that does not depend on the pose.
#[derive(Debug, Clone)]
struct LevelData {
    texture: TexturePlan,
    queries: Arc<Vec<SampleQuery>>,
    neighbours: Arc<Csr>,
    meta: PointMeta,
    base_log_scale: f64,
}

/// Pose-dependent inputs of one frame, computed once and reused.
#[derive(Debug, Clone)]
pub struct FrameGeometry {
    pub level: usize,
    pub camera: Camera,
    /// Posed vertex positions at the cloud level (N x 3).
    pub posed: Tensor,
    /// Labels at the cloud level.
    pub labels: InteractionLabels,
    pub summary: [f64; 2],
    /// theta, flattened camera and summary, as fed to the pose encoder.
    pub pose_input: Vec<f64>,
}

/// How the refinement module treats a forward pass.
#[derive(Debug, Clone, Copy)]
pub enum Refine<'a> {
    Off,
    /// Derive a fresh plan from the predicted validity.
    Compute,
    Fixed(&'a RefinePlan),
}

#[derive(Debug, Clone)]
pub struct Forward {
    pub attrs: AttrVars,
    pub meta: PointMeta,
    pub plan: RefinePlan,
}

/// Per-channel gain and bias applied to the render before the image losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorCalibration {
    pub gain: [f64; 3],
    pub bias: [f64; 3],
}

/// Lower bound enforced on calibration gains after every update.
pub const MIN_GAIN: f64 = 1e-3;

impl Default for ColorCalibration {
    fn default() -> Self {
        ColorCalibration { gain: [1.0; 3], bias: [0.0; 3] }
    }
}

impl ColorCalibration {
    pub fn apply(&self, rgb: &[f64]) -> Vec<f64> {
        rgb.iter().enumerate().map(|(i, v)| v * self.gain[i % 3] + self.bias[i % 3]).collect()
    }

    pub fn clamp(&mut self) {
        for g in &mut self.gain {
            *g = g.max(MIN_GAIN);
        }
    }
}

/// Reference image and, optionally, its mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Target {
    pub rgb: Vec<f64>,
    pub mask: Option<Vec<f64>>,
}

/// Individually weighted loss terms; `total` is their sum.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LossTerms {
    pub rgb: f64,
    pub perceptual: f64,
    pub mask: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossTerms {
    pub const CSV_HEADER: &'static str = "rgb,perceptual,mask,reg,total";

    pub fn csv(&self) -> String {
        format!("{},{},{},{},{}", self.rgb, self.perceptual, self.mask, self.reg, self.total)
    }

    /// Unweighted sum of the already weighted terms.
    pub fn sum(&self) -> f64 {
        self.rgb + self.perceptual + self.mask + self.reg
    }
}

/// Which terms enter the objective and what receives gradients.
#[derive(Debug, Clone, Copy)]
pub struct LossSetup {
    pub weights: LossWeights,
    pub use_mask: bool,
    pub calibration: Option<ColorCalibration>,
    /// Add the texture-bias penalty's gradient to the backward seeds.
    pub reg_gradient: bool,
}

/// Result of one forward, loss and backward evaluation.
pub struct Evaluation {
    pub terms: LossTerms,
    pub image: RenderedImage,
    pub cloud: GaussianCloud,
    pub plan: RefinePlan,
    pub grads: Gradients,
    /// Gradient of the total with respect to gain then bias.
    pub calibration_grad: [f64; 6],
}

pub struct Avatar {
    pub config: ModelConfig,
    pub hand: HandModel,
    pub weights: ParamStore,
    levels: Vec<LevelData>,
    perceptual: Perceptual,
}

impl Avatar {
    pub fn new(config: ModelConfig, hand: HandModel, weights: ParamStore) -> Result<Self> {
        config.validate()?;
        config.net.check_weights(&weights)?;
        let levels = (0..=hand.max_level()).map(|l| level_data(&config.net, &hand, l)).collect::<Result<Vec<_>>>()?;
        Ok(Avatar { config, hand, weights, levels, perceptual: Perceptual::default() })
    }

    /// Freshly initialized network on the default rig.
    pub fn init(config: ModelConfig, max_level: usize, seed: u64) -> Result<Self> {
        let weights = config.net.init_weights(seed);
        Self::new(config, HandModel::default_model(max_level), weights)
    }

    pub fn max_level(&self) -> usize {
        self.hand.max_level()
    }

    pub fn point_count(&self, level: usize) -> usize {
        self.levels[level].meta.len()
    }

    pub fn perceptual(&self) -> &Perceptual {
        &self.perceptual
    }

    /// Poses the hands, runs the interaction detector and assembles the pose
    /// encoder input for one frame.
    pub fn prepare(&self, level: usize, pose: &PoseParams, camera: &Camera) -> Result<FrameGeometry> {
        if level > self.max_level() {
            return Err(Error::Invalid(format!("level {level} exceeds the model's {}", self.max_level())));
        }
        camera.validate()?;
        pose.validate(self.hand.rig.joints_per_hand)?;
        let canonical = self.hand.canonical(level);
        let posed = pose_mesh(canonical, &self.hand.rig, pose)?;
        let d = self.config.detect_level.min(level);
        let nd = self.hand.canonical(d).vertex_count();
        let sides_d = &canonical.side[..nd];
        let coarse = detect_interactions(&canonical.vertices[..nd], &posed.vertices[..nd], sides_d, &self.config.detection)?;
        let summary = coarse.summary(sides_d);
        let labels = if d == level { coarse } else { inherit_from_parents(&coarse, &self.hand.ancestors(level, d), &canonical.side)? };
        let mut pose_input = pose.theta_flat();
        if pose_input.len() != self.config.net.theta_dim {
            return Err(Error::Shape(format!("pose has {} theta entries, network expects {}", pose_input.len(), self.config.net.theta_dim)));
        }
        pose_input.extend_from_slice(&camera.flatten());
        pose_input.extend_from_slice(&summary);
        let n = posed.vertex_count();
        let posed = Tensor::from_vec(n, 3, posed.vertices.iter().flatten().copied().collect());
        Ok(FrameGeometry { level, camera: camera.clone(), posed, labels, summary, pose_input })
    }

    /// Binds the network blocks (not identity maps) to a graph.
    pub fn bind_network(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound::bind(g, &self.weights, |n| !n.starts_with("identity."), |_| trainable)
    }

    /// Pose, geometry and texture encoding through attribute prediction and refinement.
    pub fn forward(&self, g: &mut Graph, b: &Bound, identity: Var, bias: Option<Var>, frame: &FrameGeometry, refine: Refine<'_>) -> Result<Forward> {
        let cfg = &self.config.net;
        let lv = &self.levels[frame.level];
        let x = g.constant(Tensor::row_vector(frame.pose_input.clone()));
        let pose_emb = crate::features::network::encode_pose_var(g, b, x);
        let positions = g.constant(frame.posed.clone());
        let geo = encode_geometry(g, b, cfg, positions, &lv.neighbours, pose_emb)?;
        let mut t = decode_texture(g, b, cfg, identity, pose_emb, &lv.texture)?;
        if let Some(bias) = bias {
            t = add_texture_bias(g, t, bias);
        }
        let tex = sample_points(g, cfg, t, &lv.queries);
        let mut f = fuse_features(g, geo, tex)?;
        if self.config.attention {
            let flagged: Vec<u32> = frame.labels.flagged().into_iter().map(|i| i as u32).collect();
            f = interaction_attention(g, b, f, &flagged);
        }
        let mut attrs = predict_attributes(g, b, cfg, f, positions, lv.base_log_scale)?;
        // validity gates opacity so it is trained by the image loss
        attrs.opacity = g.mul(attrs.opacity, attrs.validity);
        let plan = match refine {
            Refine::Off => RefinePlan::identity(lv.meta.len()),
            Refine::Fixed(p) => {
                if p.input_len != lv.meta.len() {
                    return Err(Error::Shape(format!("refine plan covers {} points, cloud has {}", p.input_len, lv.meta.len())));
                }
                p.clone()
            }
            Refine::Compute => {
                let v = g.value(attrs.validity).data.clone();
                let s = g.value(attrs.log_scale);
                let ls: Vec<[f64; 3]> = (0..s.rows).map(|i| [s.at(i, 0), s.at(i, 1), s.at(i, 2)]).collect();
                RefinePlan::compute(&v, &ls, &self.config.refinement)
            }
        };
        let (attrs, meta) = plan.apply(g, &attrs, &lv.meta);
        Ok(Forward { attrs, meta, plan })
    }

    /// Renders an identity map (plus optional texture bias) without gradients.
    pub fn render_identity(&self, identity: &Tensor, bias: Option<&Tensor>, frame: &FrameGeometry, refine: Refine<'_>) -> Result<(GaussianCloud, RenderedImage, RefinePlan)> {
        let mut g = Graph::new();
        let b = self.bind_network(&mut g, false);
        let id = g.constant(identity.clone());
        let bias = bias.map(|t| g.constant(t.clone()));
        let fwd = self.forward(&mut g, &b, id, bias, frame, refine)?;
        let cloud = fwd.attrs.cloud(&g, &fwd.meta);
        let img = render(&cloud, &frame.camera, self.config.background)?;
        Ok((cloud, img, fwd.plan))
    }

    /// Forward pass, render, loss and backward. Gradients flow to every
    /// trainable leaf of `g`; `bias` also picks up the penalty term.
    #[allow(clippy::too_many_arguments)]
    pub fn evaluate(
        &self,
        g: &mut Graph,
        b: &Bound,
        identity: Var,
        bias: Option<Var>,
        frame: &FrameGeometry,
        refine: Refine<'_>,
        target: &Target,
        setup: &LossSetup,
    ) -> Result<Evaluation> {
        let fwd = self.forward(g, b, identity, bias, frame, refine)?;
        let cloud = fwd.attrs.cloud(g, &fwd.meta);
        let image = render(&cloud, &frame.camera, self.config.background)?;
        let (mut terms, d_rgb, d_alpha, calibration_grad) = self.image_loss(&image, target, setup)?;

        let grads = render_backward(&cloud, &frame.camera, self.config.background, &d_rgb, &d_alpha)?;
        let [dm, ds, dq, do_, dc] = grads.tensors();
        let mut seeds = vec![
            (fwd.attrs.mean, dm),
            (fwd.attrs.log_scale, ds),
            (fwd.attrs.rotation, dq),
            (fwd.attrs.opacity, do_),
            (fwd.attrs.color, dc),
        ];
        if let Some(bias) = bias {
            let w = setup.weights.reg;
            terms.reg = w * g.value(bias).sum_squares();
            if setup.reg_gradient && w > 0.0 {
                seeds.push((bias, g.value(bias).scaled(2.0 * w)));
            }
        }
        terms.total = terms.sum();
        let grads = g.backward(&seeds);
        Ok(Evaluation { terms, image, cloud, plan: fwd.plan, grads, calibration_grad })
    }

    /// Image-space losses and their gradients with respect to the rendered
    /// colour, the rendered silhouette and the calibration parameters.
    pub fn image_loss(&self, image: &RenderedImage, target: &Target, setup: &LossSetup) -> Result<(LossTerms, Vec<f64>, Vec<f64>, [f64; 6])> {
        let (h, w) = (image.height, image.width);
        let n = h * w;
        if target.rgb.len() != 3 * n {
            return Err(Error::Shape(format!("target has {} values, render has {}", target.rgb.len(), 3 * n)));
        }
        let lw = &setup.weights;
        let mut lg = Graph::new();
        let img = lg.param(Tensor::from_vec(n, 3, image.rgb.clone()));
        let tgt = lg.constant(Tensor::from_vec(n, 3, target.rgb.clone()));
        let (pred, cal_vars) = match setup.calibration {
            Some(c) => {
                let gain = lg.param(Tensor::row_vector(c.gain.to_vec()));
                let bias = lg.param(Tensor::row_vector(c.bias.to_vec()));
                let gb = lg.broadcast_rows(gain, n);
                let scaled = lg.mul(img, gb);
                (lg.add_bias(scaled, bias), Some((gain, bias)))
            }
            None => (img, None),
        };
        let mut parts = Vec::new();
        let rgb = l1(&mut lg, pred, tgt);
        let rgb = lg.scale(rgb, lw.rgb);
        parts.push(rgb);
        let perc = self.perceptual.loss(&mut lg, pred, tgt, h, w)?;
        let perc = lg.scale(perc, lw.perceptual);
        parts.push(perc);
        let mut alpha_var = None;
        let mut mask_term = None;
        if setup.use_mask {
            let m = target.mask.as_ref().ok_or_else(|| Error::Invalid("mask loss requested without a reference mask".into()))?;
            if m.len() != n {
                return Err(Error::Shape(format!("mask has {} values, render has {n}", m.len())));
            }
            let a = lg.param(Tensor::from_vec(n, 1, image.alpha.clone()));
            let mr = lg.constant(Tensor::from_vec(n, 1, m.clone()));
            let ml = mse(&mut lg, a, mr);
            let ml = lg.scale(ml, lw.mask);
            parts.push(ml);
            alpha_var = Some(a);
            mask_term = Some(ml);
        }
        let total = parts[1..].iter().fold(parts[0], |acc, &p| lg.add(acc, p));
        let mut grads = lg.backward_scalar(total);
        let terms = LossTerms {
            rgb: lg.value(rgb).item(),
            perceptual: lg.value(perc).item(),
            mask: mask_term.map_or(0.0, |m| lg.value(m).item()),
            reg: 0.0,
            total: lg.value(total).item(),
        };
        let d_rgb = grads.take(img).data;
        let d_alpha = alpha_var.map_or_else(|| vec![0.0; n], |a| grads.take(a).data);
        let mut cal = [0.0; 6];
        if let Some((gain, bias)) = cal_vars {
            cal[..3].copy_from_slice(&grads.take(gain).data);
            cal[3..].copy_from_slice(&grads.take(bias).data);
        }
        Ok((terms, d_rgb, d_alpha, cal))
    }
}

fn level_data(cfg: &NetConfig, hand: &HandModel, level: usize) -> Result<LevelData> {
    let mesh = hand.canonical(level);
    let texture = TexturePlan::new(cfg, mesh)?;
    let queries = point_queries(cfg, &mesh.uv, &mesh.side)?;
    let neighbours = Arc::new(Csr::from_lists(&mesh.one_rings()));
    let meta = PointMeta { uv: mesh.uv.clone(), side: mesh.side.clone(), parent: (0..mesh.vertex_count() as u32).collect() };
    let edges = unique_edges(&mesh.faces);
    let dist = |a: u32, b: u32| {
        let (p, q) = (mesh.vertices[a as usize], mesh.vertices[b as usize]);
        ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
    };
    let mean_edge = edges.iter().map(|&(a, b)| dist(a, b)).sum::<f64>() / edges.len().max(1) as f64;
    Ok(LevelData { texture, queries, neighbours, meta, base_log_scale: (BASE_SCALE_FRACTION * mean_edge).ln() })
}
