//! Finite-difference verification of every analytic gradient.

use std::sync::Arc;

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::features::{
    decode_texture, encode_geometry, encode_pose, identity_block, interaction_attention, point_queries, sample_points, Bound,
    NetConfig, ParamStore, TexturePlan,
};
use crate::gaussians::{predict_attributes, Gaussian, GaussianCloud, RefinementConfig};
use crate::graph::{Csr, Graph, Tensor, Var};
use crate::hand::{HandModel, PoseParams, RigSpec};
use crate::interaction::DetectionConfig;
use crate::optimize::{Avatar, ColorCalibration, LossSetup, LossWeights, ModelConfig, Refine, Target};
use crate::raster::{render, render_backward, render_signature, Camera, RenderedImage};

pub const FD_STEP: f64 = 1e-5;
/// Tolerance for individual operations.
pub const GRAD_TOL: f64 = 1e-4;
/// Tolerance for the end-to-end chain.
pub const CHAIN_TOL: f64 = 1e-3;
/// Entries smaller than this fraction of a block's largest gradient are
/// compared against that floor instead of their own magnitude.
pub const REL_FLOOR: f64 = 1e-5;

/// Relative error with a magnitude floor of `REL_FLOOR * max(scale, 1)`.
pub fn rel_err(analytic: f64, numeric: f64, scale: f64) -> f64 {
    let floor = REL_FLOOR * scale.max(1.0);
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckStats {
    pub name: String,
    pub checked: usize,
    /// Coordinates skipped because the perturbation crossed a discontinuity.
    pub excluded: usize,
    pub max_rel: f64,
    pub worst: String,
}

impl CheckStats {
    pub fn new(name: impl Into<String>) -> Self {
        CheckStats { name: name.into(), ..Default::default() }
    }

    pub fn record(&mut self, label: impl FnOnce() -> String, analytic: f64, numeric: f64, scale: f64) {
        let e = rel_err(analytic, numeric, scale);
        self.checked += 1;
        if e > self.max_rel || self.worst.is_empty() {
            self.max_rel = self.max_rel.max(e);
            if e >= self.max_rel {
                self.worst = format!("{} analytic {analytic:.6e} numeric {numeric:.6e}", label());
            }
        }
    }

    pub fn merge(&mut self, other: &CheckStats) {
        self.checked += other.checked;
        self.excluded += other.excluded;
        if other.max_rel > self.max_rel {
            self.max_rel = other.max_rel;
            self.worst = format!("{}: {}", other.name, other.worst);
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel < tol
    }
}

/// Central difference of `f` along one coordinate. Returns `None` when the
/// discontinuity signature at either side differs from the base point.
pub fn central_difference(f: &mut dyn FnMut(f64) -> (f64, u64), x0: f64, base_sig: u64) -> Option<f64> {
    let (lp, sp) = f(x0 + FD_STEP);
    let (lm, sm) = f(x0 - FD_STEP);
    f(x0);
    if sp != base_sig || sm != base_sig {
        return None;
    }
    Some((lp - lm) / (2.0 * FD_STEP))
}

/// A random scene of `n` Gaussians seen by a `size x size` camera.
pub fn random_scene(seed: u64, n: usize, size: usize) -> (GaussianCloud, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::look_at([0.0, 0.0, -1.0], [0.0; 3], [0.0, 1.0, 0.0], 30.0, size, size);
    let points = (0..n)
        .map(|_| {
            let mut q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.iter_mut().for_each(|x| *x /= qn);
            Gaussian {
                mean: [rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2), rng.random_range(-0.1..0.1)],
                log_scale: std::array::from_fn(|_| rng.random_range(0.008f64..0.04).ln()),
                rotation: q,
                opacity: rng.random_range(0.2..0.9),
                color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                validity: 0.5,
                uv: [0.5, 0.5],
                side: crate::hand::HandSide::Left,
                parent: 0,
            }
        })
        .collect();
    (GaussianCloud { points }, cam)
}

fn weights(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn weighted(img: &crate::raster::RenderedImage, wr: &[f64], wa: &[f64]) -> f64 {
    img.rgb.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>() + img.alpha.iter().zip(wa).map(|(a, b)| a * b).sum::<f64>()
}

fn attr_mut(p: &mut Gaussian, field: usize, k: usize) -> &mut f64 {
    match field {
        0 => &mut p.mean[k],
        1 => &mut p.log_scale[k],
        2 => &mut p.rotation[k],
        3 => &mut p.opacity,
        _ => &mut p.color[k],
    }
}

/// Checks every attribute gradient of the renderer on one random scene.
pub fn check_render(seed: u64, n: usize, size: usize) -> Result<CheckStats> {
    let (cloud, cam) = random_scene(seed, n, size);
    let bg = [0.2, 0.1, 0.3];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let wr = weights(&mut rng, 3 * size * size);
    let wa = weights(&mut rng, size * size);
    let grads = render_backward(&cloud, &cam, bg, &wr, &wa)?;
    let base_sig = render_signature(&cloud, &cam);
    let mut stats = CheckStats::new("render");
    let scales = {
        let m = |v: &mut dyn Iterator<Item = f64>| v.fold(0.0f64, |a, b| a.max(b.abs()));
        [
            m(&mut grads.mean.iter().flatten().copied()),
            m(&mut grads.log_scale.iter().flatten().copied()),
            m(&mut grads.rotation.iter().flatten().copied()),
            m(&mut grads.opacity.iter().copied()),
            m(&mut grads.color.iter().flatten().copied()),
        ]
    };
    for i in 0..cloud.len() {
        for field in 0..5 {
            let dims = [3, 3, 4, 1, 3][field];
            for k in 0..dims {
                let mut work = cloud.clone();
                let x0 = *attr_mut(&mut work.points[i], field, k);
                let mut f = |x: f64| -> (f64, u64) {
                    *attr_mut(&mut work.points[i], field, k) = x;
                    let img = render(&work, &cam, bg).expect("valid camera");
                    (weighted(&img, &wr, &wa), render_signature(&work, &cam))
                };
                let analytic = match field {
                    0 => grads.mean[i][k],
                    1 => grads.log_scale[i][k],
                    2 => grads.rotation[i][k],
                    3 => grads.opacity[i],
                    _ => grads.color[i][k],
                };
                match central_difference(&mut f, x0, base_sig) {
                    None => stats.excluded += 1,
                    Some(num) => {
                        let name = ["mean", "log_scale", "rotation", "opacity", "color"][field];
                        stats.record(|| format!("gaussian {i} {name}[{k}]"), analytic, num, scales[field]);
                    }
                }
            }
        }
    }
    Ok(stats)
}

/// A two-bone-per-hand rig small enough for exhaustive checks (32 vertices).
pub const TINY_RIG: &str = r#"
rig_version = 1
radial_segments = 3
rings_per_bone = 1

[[hand]]
side = "left"
wrist = [-0.16, 0.0, 0.0]
mirror = false

[[hand]]
side = "right"
wrist = [0.16, 0.0, 0.0]
mirror = true

[[joint]]
name = "wrist"
offset = [0.0, 0.0, 0.0]
radius = 0.0

[[joint]]
name = "finger1"
parent = "wrist"
offset = [0.02, 0.0, 0.06]
radius = 0.014

[[joint]]
name = "finger2"
parent = "finger1"
offset = [0.005, 0.0, 0.045]
radius = 0.011
"#;

/// Network widths for the tiny checks.
pub fn tiny_net() -> NetConfig {
    NetConfig { feature_dim: 4, pose_dim: 6, bands: 2, map_height: 8, map_width: 8, hidden: 8, head_hidden: 8, theta_dim: 18, offset_clamp: 0.005 }
}

/// A randomly initialized avatar on the tiny rig.
pub fn tiny_avatar(seed: u64) -> Result<Avatar> {
    let spec = RigSpec::parse(TINY_RIG)?;
    let hand = HandModel::new(&spec, 0)?;
    let config = ModelConfig {
        net: tiny_net(),
        detection: DetectionConfig { canonical_neighbours: 8, posed_neighbours: 8, threshold: 6 },
        refinement: RefinementConfig::default(),
        detect_level: 0,
        attention: true,
        background: [0.1, 0.05, 0.2],
    };
    let weights = config.net.init_weights(seed);
    Avatar::new(config, hand, weights)
}

/// Moves the refinement thresholds to the 30th and 75th validity percentiles
/// of a frame so that both pruning and splitting take place.
pub fn spread_thresholds(avatar: &mut Avatar, identity: &Tensor, bias: Option<&Tensor>, frame: &crate::optimize::FrameGeometry) -> Result<()> {
    let mut g = Graph::new();
    let b = avatar.bind_network(&mut g, false);
    let i = g.constant(identity.clone());
    let t = bias.map(|t| g.constant(t.clone()));
    let fw = avatar.forward(&mut g, &b, i, t, frame, Refine::Off)?;
    let mut v = g.value(fw.attrs.validity).data.clone();
    v.sort_by(f64::total_cmp);
    let at = |q: f64| v[((v.len() - 1) as f64 * q) as usize];
    avatar.config.refinement.prune_below = at(0.3);
    avatar.config.refinement.split_above = at(0.75);
    Ok(())
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
}

/// A random pose of the tiny rig with the hands close together.
pub fn tiny_pose(rng: &mut ChaCha8Rng) -> PoseParams {
    let mut pose = PoseParams::default();
    for h in &mut pose.hands {
        h.theta = (0..9).map(|i| if i < 3 { 0.0 } else { rng.random_range(-0.4..0.4) }).collect();
    }
    pose.hands[0].root_translation = [rng.random_range(0.0..0.12), 0.0, 0.0];
    pose.hands[1].root_translation = [-rng.random_range(0.0..0.12), 0.0, 0.0];
    pose
}

pub fn tiny_camera(size: usize) -> Camera {
    Camera::look_at([0.0, 0.45, 0.05], [0.0, 0.0, 0.05], [0.0, 0.0, 1.0], 50.0, size, size)
}

/// Checks sampled entries of named parameter blocks for a smooth graph
/// function. The scalar is a fixed random projection of the output.
fn check_blocks(name: &str, store: &ParamStore, blocks: &[&str], per_block: usize, seed: u64, f: &dyn Fn(&mut Graph, &Bound) -> Result<Var>) -> Result<CheckStats> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trainable = |n: &str| blocks.contains(&n);
    let eval = |store: &ParamStore, w: Option<&Tensor>| -> Result<(f64, Tensor, Graph, Bound, Var)> {
        let mut g = Graph::new();
        let b = Bound::bind(&mut g, store, |_| true, trainable);
        let out = f(&mut g, &b)?;
        let w = w.cloned().unwrap_or_else(|| {
            let (r, c) = g.value(out).shape();
            let mut wr = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
            random_tensor(&mut wr, r, c, 1.0)
        });
        let wv = g.constant(w.clone());
        let p = g.mul(out, wv);
        let l = g.sum(p);
        Ok((g.value(l).item(), w, g, b, l))
    };
    let (_, w, g, b, loss) = eval(store, None)?;
    let grads = g.backward_scalar(loss);
    let mut stats = CheckStats::new(name);
    for block in blocks {
        let grad = grads.grad(b.get(block));
        let scale = grad.max_abs();
        let n = grad.data.len();
        for idx in sample_indices(&mut rng, n, per_block.min(n)) {
            let mut work = store.clone();
            let x0 = work.get(block).expect("bound block").data[idx];
            let mut at = |x: f64| -> (f64, u64) {
                work.get_mut(block).expect("bound block").data[idx] = x;
                (eval(&work, Some(&w)).expect("evaluation succeeded once").0, 0)
            };
            if let Some(num) = central_difference(&mut at, x0, 0) {
                stats.record(|| format!("{block}[{idx}]"), grad.data[idx], num, scale);
            }
        }
    }
    Ok(stats)
}

/// Pose encoder, geometry encoder, texture decoder, interaction attention
/// and attribute heads, each against finite differences in its weights.
pub fn check_encoders(seed: u64) -> Result<CheckStats> {
    let avatar = tiny_avatar(seed)?;
    let cfg = avatar.config.net;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xe11c);
    let mesh = avatar.hand.canonical(0).clone();
    let n = mesh.vertex_count();
    let mut store = avatar.weights.clone();
    store.insert(identity_block(1), random_tensor(&mut rng, cfg.map_height * cfg.map_width, 2 * cfg.feature_dim, 1.0));
    store.insert("input.f", random_tensor(&mut rng, n, cfg.feature_dim, 1.0));
    store.insert("input.pe", random_tensor(&mut rng, 1, cfg.pose_dim, 1.0));
    let theta: Vec<f64> = (0..cfg.theta_dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    let camera = tiny_camera(32).flatten();
    let positions = Tensor::from_vec(n, 3, mesh.vertices.iter().flatten().copied().collect());
    let nbrs = Arc::new(Csr::from_lists(&mesh.one_rings()));
    let plan = TexturePlan::new(&cfg, &mesh)?;
    let flagged: Vec<u32> = (0..n as u32).filter(|i| i % 3 == 0).collect();
    let k = 6;
    let mut stats = CheckStats::new("encoders");
    let pose = check_blocks("pose encoder", &store, &["pose.l1.w", "pose.l1.b", "pose.l2.w", "pose.l3.w", "pose.l3.b"], k, seed, &|g, b| {
        encode_pose(g, b, &cfg, &theta, &camera, [0.1, 0.3])
    })?;
    let geo = check_blocks("geometry encoder", &store, &["geo.l1.w", "geo.l2.w", "geo.l3.w", "input.pe"], k, seed + 1, &|g, b| {
        let p = g.constant(positions.clone());
        encode_geometry(g, b, &cfg, p, &nbrs, b.get("input.pe"))
    })?;
    let id = identity_block(1);
    let tex = check_blocks("texture decoder", &store, &["tex.l1.w", "tex.l2.w", "tex.l3.w", "tex.l3.b", id.as_str(), "input.pe"], k, seed + 2, &|g, b| {
        decode_texture(g, b, &cfg, b.get(&identity_block(1)), b.get("input.pe"), &plan)
    })?;
    let attn = check_blocks("interaction attention", &store, &["attn.q", "attn.k", "attn.v", "input.f"], k, seed + 3, &|g, b| {
        Ok(interaction_attention(g, b, b.get("input.f"), &flagged))
    })?;
    let heads = check_blocks("attribute heads", &store, &["head.l1.w", "head.l2.w", "head.l2.b", "input.f"], 2 * k, seed + 4, &|g, b| {
        let base = g.constant(positions.clone());
        let a = predict_attributes(g, b, &cfg, b.get("input.f"), base, -5.0)?;
        Ok(g.concat_cols(&[a.mean, a.log_scale, a.rotation, a.opacity, a.color, a.validity]))
    })?;
    for s in [pose, geo, tex, attn, heads] {
        stats.merge(&s);
    }
    Ok(stats)
}

/// Bilinear texture sampling against finite differences in the map.
pub fn check_sampling(seed: u64) -> Result<CheckStats> {
    let cfg = tiny_net();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5a3);
    let mut store = ParamStore::new();
    store.insert("map", random_tensor(&mut rng, cfg.map_height * cfg.map_width, 2 * cfg.feature_dim, 1.0));
    let uv: Vec<[f64; 2]> = (0..40).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect();
    let sides: Vec<_> = (0..40).map(|i| crate::hand::HandSide::from_index(i % 2)).collect();
    let q = point_queries(&cfg, &uv, &sides)?;
    check_blocks("texture sampling", &store, &["map"], 40, seed, &|g, b| Ok(sample_points(g, &cfg, b.get("map"), &q)))
}

fn fake_image(rgb: Vec<f64>, alpha: Vec<f64>, size: usize) -> RenderedImage {
    RenderedImage { width: size, height: size, rgb, alpha, contributors: vec![0; size * size], culled: 0 }
}

/// Smallest gap between a calibrated prediction and its target in the loss check.
const KINK_MARGIN: f64 = 1e-3;

/// Colour, perceptual and mask losses with calibration, against finite
/// differences in the rendered colour, silhouette and calibration.
pub fn check_losses(seed: u64, size: usize) -> Result<CheckStats> {
    let avatar = tiny_avatar(seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let n = size * size;
    let rgb: Vec<f64> = (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect();
    let alpha: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
    let cal = ColorCalibration { gain: std::array::from_fn(|_| rng.random_range(0.8..1.2)), bias: std::array::from_fn(|_| rng.random_range(-0.05..0.05)) };
    let calibrated = cal.apply(&rgb);
    // keep every target away from the absolute-error kink: a calibration
    // perturbation moves all pixels of a channel at once
    let target_rgb = calibrated
        .iter()
        .map(|&c| {
            let t: f64 = rng.random_range(0.0..1.0);
            if (t - c).abs() < KINK_MARGIN { c + KINK_MARGIN.copysign(t - c) } else { t }
        })
        .collect();
    let target = Target { rgb: target_rgb, mask: Some((0..n).map(|_| rng.random_range(0.0..1.0)).collect()) };
    let setup = |c: ColorCalibration| LossSetup { weights: LossWeights::default(), use_mask: true, calibration: Some(c), reg_gradient: true };
    let total = |rgb: &[f64], alpha: &[f64], c: ColorCalibration| -> f64 {
        avatar.image_loss(&fake_image(rgb.to_vec(), alpha.to_vec(), size), &target, &setup(c)).expect("valid shapes").0.total
    };
    let (_, d_rgb, d_alpha, d_cal) = avatar.image_loss(&fake_image(rgb.clone(), alpha.clone(), size), &target, &setup(cal))?;
    let mut stats = CheckStats::new("losses");
    let scale = d_rgb.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    for idx in sample_indices(&mut rng, 3 * n, 60) {
        // the absolute error has a kink where prediction and target meet
        if (calibrated[idx] - target.rgb[idx]).abs() < 10.0 * FD_STEP {
            stats.excluded += 1;
            continue;
        }
        let mut work = rgb.clone();
        let mut f = |x: f64| {
            work[idx] = x;
            (total(&work, &alpha, cal), 0)
        };
        if let Some(num) = central_difference(&mut f, rgb[idx], 0) {
            stats.record(|| format!("rgb[{idx}]"), d_rgb[idx], num, scale);
        }
    }
    let scale = d_alpha.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    for idx in sample_indices(&mut rng, n, 30) {
        let mut work = alpha.clone();
        let mut f = |x: f64| {
            work[idx] = x;
            (total(&rgb, &work, cal), 0)
        };
        if let Some(num) = central_difference(&mut f, alpha[idx], 0) {
            stats.record(|| format!("alpha[{idx}]"), d_alpha[idx], num, scale);
        }
    }
    let scale = d_cal.iter().fold(0.0f64, |a, b| a.max(b.abs()));
    for k in 0..6 {
        let mut c = cal;
        let x0 = if k < 3 { cal.gain[k] } else { cal.bias[k - 3] };
        let mut f = |x: f64| {
            if k < 3 {
                c.gain[k] = x;
            } else {
                c.bias[k - 3] = x;
            }
            (total(&rgb, &alpha, c), 0)
        };
        if let Some(num) = central_difference(&mut f, x0, 0) {
            stats.record(|| format!("calibration[{k}]"), d_cal[k], num, scale);
        }
    }
    Ok(stats)
}

/// The whole fitting objective (colour, perceptual, mask and texture-bias
/// terms) differentiated through refinement, the renderer and every network
/// stage down to identity-map texels and texture-bias entries.
pub fn check_pipeline(seed: u64, size: usize) -> Result<CheckStats> {
    let mut avatar = tiny_avatar(seed)?;
    let cfg = avatar.config.net;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x919e);
    let pose = tiny_pose(&mut rng);
    let cam = tiny_camera(size);
    let frame = avatar.prepare(0, &pose, &cam)?;
    let identity = random_tensor(&mut rng, cfg.map_height * cfg.map_width, 2 * cfg.feature_dim, 1.0);
    let bias = random_tensor(&mut rng, cfg.map_height * cfg.map_width, cfg.feature_dim, 0.2);
    spread_thresholds(&mut avatar, &identity, Some(&bias), &frame)?;
    let avatar = avatar;
    let n = size * size;
    let target = Target { rgb: (0..3 * n).map(|_| rng.random_range(0.0..1.0)).collect(), mask: Some((0..n).map(|_| rng.random_range(0.0..1.0)).collect()) };
    let cal = ColorCalibration { gain: [1.1, 0.9, 1.0], bias: [0.02, -0.01, 0.0] };
    let setup = LossSetup { weights: LossWeights::default(), use_mask: true, calibration: Some(cal), reg_gradient: true };
    let (_, _, plan) = avatar.render_identity(&identity, Some(&bias), &frame, Refine::Compute)?;

    let objective = |id: &Tensor, bs: &Tensor| -> Result<(f64, u64)> {
        let mut g = Graph::new();
        let b = avatar.bind_network(&mut g, false);
        let i = g.constant(id.clone());
        let t = g.constant(bs.clone());
        let fwd = avatar.forward(&mut g, &b, i, Some(t), &frame, Refine::Fixed(&plan))?;
        let cloud = fwd.attrs.cloud(&g, &fwd.meta);
        let img = render(&cloud, &cam, avatar.config.background)?;
        let (mut terms, _, _, _) = avatar.image_loss(&img, &target, &setup)?;
        terms.reg = setup.weights.reg * bs.sum_squares();
        // image clamps and any change of the refinement plan are discontinuities
        let (_, _, p) = avatar.render_identity(id, Some(bs), &frame, Refine::Compute)?;
        let sig = render_signature(&cloud, &cam) ^ (p != plan) as u64;
        Ok((terms.sum(), sig))
    };
    let mut g = Graph::new();
    let b = avatar.bind_network(&mut g, false);
    let i = g.param(identity.clone());
    let t = g.param(bias.clone());
    let ev = avatar.evaluate(&mut g, &b, i, Some(t), &frame, Refine::Fixed(&plan), &target, &setup)?;
    let (base, base_sig) = objective(&identity, &bias)?;
    if (base - ev.terms.total).abs() > 1e-12 * base.abs().max(1.0) {
        return Err(crate::error::Error::Invalid(format!("objective mismatch: {base} vs {}", ev.terms.total)));
    }
    let g_id = ev.grads.grad(i);
    let g_bias = ev.grads.grad(t);
    let mut stats = CheckStats::new("pipeline");
    for (name, grad, is_id) in [("identity", &g_id, true), ("texture_bias", &g_bias, false)] {
        let scale = grad.max_abs();
        let live: Vec<usize> = (0..grad.data.len()).filter(|&k| grad.data[k] != 0.0).collect();
        let mut picks: Vec<usize> = sample_indices(&mut rng, live.len(), live.len().min(12)).into_iter().map(|k| live[k]).collect();
        picks.extend(sample_indices(&mut rng, grad.data.len(), 3));
        for idx in picks {
            let mut id = identity.clone();
            let mut bs = bias.clone();
            let x0 = if is_id { id.data[idx] } else { bs.data[idx] };
            let mut f = |x: f64| {
                if is_id {
                    id.data[idx] = x;
                } else {
                    bs.data[idx] = x;
                }
                objective(&id, &bs).expect("evaluation succeeded once")
            };
            match central_difference(&mut f, x0, base_sig) {
                None => stats.excluded += 1,
                Some(num) => stats.record(|| format!("{name}[{idx}]"), grad.data[idx], num, scale),
            }
        }
    }
    Ok(stats)
}

/// One line of a suite report.
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub stats: CheckStats,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.stats.passes(self.tolerance)
    }
}

/// Every check over `scenes` random scenes: renderer (n Gaussians, size px),
/// losses, encoders, sampling and the full pipeline.
pub fn run_suite(seed: u64, scenes: usize, n: usize, size: usize) -> Result<Vec<SuiteEntry>> {
    let mut render_stats = CheckStats::new("render");
    let mut losses = CheckStats::new("losses");
    let mut encoders = CheckStats::new("encoders");
    let mut sampling = CheckStats::new("texture sampling");
    let mut pipeline = CheckStats::new("pipeline");
    for s in 0..scenes as u64 {
        let k = seed.wrapping_mul(1000).wrapping_add(s);
        render_stats.merge(&check_render(k, n, size)?);
        losses.merge(&check_losses(k, size)?);
        encoders.merge(&check_encoders(k)?);
        sampling.merge(&check_sampling(k)?);
        pipeline.merge(&check_pipeline(k, size)?);
    }
    Ok(vec![
        SuiteEntry { stats: render_stats, tolerance: GRAD_TOL },
        SuiteEntry { stats: losses, tolerance: GRAD_TOL },
        SuiteEntry { stats: encoders, tolerance: GRAD_TOL },
        SuiteEntry { stats: sampling, tolerance: GRAD_TOL },
        SuiteEntry { stats: pipeline, tolerance: CHAIN_TOL },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(s: &CheckStats, tol: f64) {
        eprintln!("{}: checked {} excluded {} max_rel {:.3e} ({})", s.name, s.checked, s.excluded, s.max_rel, s.worst);
        assert!(s.passes(tol), "{} max rel err {:.3e} >= {tol:e}: {}", s.name, s.max_rel, s.worst);
    }

    #[test]
    fn tiny_avatar_prunes_and_splits() {
        let mut a = tiny_avatar(3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let frame = a.prepare(0, &tiny_pose(&mut rng), &tiny_camera(24)).unwrap();
        let id = random_tensor(&mut rng, 64, 8, 1.0);
        spread_thresholds(&mut a, &id, None, &frame).unwrap();
        let (_, _, plan) = a.render_identity(&id, None, &frame, Refine::Compute).unwrap();
        assert_eq!(plan.input_len, 32);
        assert!(plan.pruned() > 0 && !plan.splits.is_empty(), "pruned {} split {}", plan.pruned(), plan.splits.len());
    }

    #[test]
    fn losses_match_finite_differences() {
        for seed in 0..2 {
            report(&check_losses(seed, 16).unwrap(), GRAD_TOL);
        }
    }

    #[test]
    fn encoders_match_finite_differences() {
        for seed in 0..2 {
            report(&check_encoders(seed).unwrap(), GRAD_TOL);
        }
    }

    #[test]
    fn sampling_matches_finite_differences() {
        report(&check_sampling(5).unwrap(), GRAD_TOL);
    }

    #[test]
    fn pipeline_matches_finite_differences() {
        for seed in 0..2 {
            report(&check_pipeline(seed, 24).unwrap(), CHAIN_TOL);
        }
    }
}
