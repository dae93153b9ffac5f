//! Analytic adjoint of the splatting renderer.

use rayon::prelude::*;

use super::camera::Camera;
use super::project::{mat_mul, project_full, transpose, Mat3, SIGMA_CUTOFF};
use super::render::{mahalanobis, prepare, RenderTiming, ALPHA_MAX, TILE, T_MIN};
use crate::error::{Error, Result};
use crate::gaussians::GaussianCloud;
use crate::graph::{rotation_grad, Tensor};

/// Per-Gaussian gradients of a scalar loss.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderGradients {
    pub mean: Vec<[f64; 3]>,
    pub log_scale: Vec<[f64; 3]>,
    pub rotation: Vec<[f64; 4]>,
    pub opacity: Vec<f64>,
    pub color: Vec<[f64; 3]>,
}

impl RenderGradients {
    pub fn zeros(n: usize) -> Self {
        RenderGradients { mean: vec![[0.0; 3]; n], log_scale: vec![[0.0; 3]; n], rotation: vec![[0.0; 4]; n], opacity: vec![0.0; n], color: vec![[0.0; 3]; n] }
    }

    pub fn len(&self) -> usize {
        self.opacity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.opacity.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.mean.iter().flatten().chain(self.log_scale.iter().flatten()).chain(self.rotation.iter().flatten()).chain(&self.opacity).chain(self.color.iter().flatten()).all(|x| x.is_finite())
    }

    /// Gradients as tensors in attribute order (mean, log-scale, rotation, opacity, color).
    pub fn tensors(&self) -> [Tensor; 5] {
        let n = self.len();
        let flat3 = |v: &[[f64; 3]]| Tensor::from_vec(n, 3, v.iter().flatten().copied().collect());
        [
            flat3(&self.mean),
            flat3(&self.log_scale),
            Tensor::from_vec(n, 4, self.rotation.iter().flatten().copied().collect()),
            Tensor::from_vec(n, 1, self.opacity.clone()),
            flat3(&self.color),
        ]
    }
}

/// Screen-space gradient accumulator of one splat.
#[derive(Debug, Clone, Copy, Default)]
struct Screen {
    mean: [f64; 2],
    conic: [f64; 3],
    opacity: f64,
    color: [f64; 3],
}

impl Screen {
    fn add(&mut self, o: &Screen) {
        for k in 0..2 {
            self.mean[k] += o.mean[k];
        }
        for k in 0..3 {
            self.conic[k] += o.conic[k];
            self.color[k] += o.color[k];
        }
        self.opacity += o.opacity;
    }
}

struct Hit {
    slot: usize,
    alpha: f64,
    t_before: f64,
    clamped: bool,
    dx: f64,
    dy: f64,
}

/// Gradients of `sum(d_rgb * rgb) + sum(d_alpha * alpha)` with respect to
/// every Gaussian attribute. Quaternion gradients are taken with respect to
/// the stored (possibly unnormalized) quaternion.
pub fn render_backward(cloud: &GaussianCloud, cam: &Camera, bg: [f64; 3], d_rgb: &[f64], d_alpha: &[f64]) -> Result<RenderGradients> {
    cam.validate()?;
    let (w, h) = (cam.width, cam.height);
    if d_rgb.len() != 3 * w * h || d_alpha.len() != w * h {
        return Err(Error::Shape(format!("upstream gradients sized {} / {} for a {w}x{h} image", d_rgb.len(), d_alpha.len())));
    }
    let mut timing = RenderTiming::default();
    let prep = prepare::<f64>(cloud, cam, true, &mut timing);
    let splats = &prep.splats;
    let cutoff = SIGMA_CUTOFF * SIGMA_CUTOFF;

    // per-tile partial sums, indexed like the tile's splat list
    let partials: Vec<Vec<Screen>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % prep.tiles_x, tile / prep.tiles_x);
            let list = &prep.tiles[tile];
            let mut acc = vec![Screen::default(); list.len()];
            let mut hits: Vec<Hit> = Vec::new();
            for py in ty * TILE..((ty + 1) * TILE).min(h) {
                for px in tx * TILE..((tx + 1) * TILE).min(w) {
                    let pix = py * w + px;
                    let g_rgb = &d_rgb[3 * pix..3 * pix + 3];
                    let g_m = d_alpha[pix];
                    if g_rgb.iter().all(|x| *x == 0.0) && g_m == 0.0 {
                        continue;
                    }
                    let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
                    hits.clear();
                    let mut t = 1.0;
                    for (slot, &s) in list.iter().enumerate() {
                        let sp = &splats[s as usize];
                        let (dx, dy) = (cx - sp.mean[0], cy - sp.mean[1]);
                        let q = mahalanobis(&sp.conic, dx, dy);
                        if q > cutoff {
                            continue;
                        }
                        let raw = sp.opacity * (-0.5 * q).exp();
                        let alpha = raw.min(ALPHA_MAX);
                        hits.push(Hit { slot, alpha, t_before: t, clamped: raw > ALPHA_MAX, dx, dy });
                        t *= 1.0 - alpha;
                        if t < T_MIN {
                            break;
                        }
                    }
                    let t_final = t;
                    let mut after = [bg[0] * t_final, bg[1] * t_final, bg[2] * t_final];
                    for hit in hits.iter().rev() {
                        let sp = &splats[list[hit.slot] as usize];
                        let a = &mut acc[hit.slot];
                        let wgt = hit.alpha * hit.t_before;
                        let one_minus = 1.0 - hit.alpha;
                        let mut d_alpha_i = g_m * t_final / one_minus;
                        for k in 0..3 {
                            a.color[k] += g_rgb[k] * wgt;
                            d_alpha_i += g_rgb[k] * (sp.color[k] * hit.t_before - after[k] / one_minus);
                            after[k] += sp.color[k] * wgt;
                        }
                        if hit.clamped {
                            continue;
                        }
                        let gauss = hit.alpha / sp.opacity;
                        a.opacity += d_alpha_i * gauss;
                        // alpha = o exp(-q/2)
                        let dq = -0.5 * hit.alpha * d_alpha_i;
                        let (dx, dy) = (hit.dx, hit.dy);
                        let cn = &sp.conic;
                        a.mean[0] += dq * -2.0 * (cn[0] * dx + cn[1] * dy);
                        a.mean[1] += dq * -2.0 * (cn[1] * dx + cn[2] * dy);
                        a.conic[0] += dq * dx * dx;
                        a.conic[1] += dq * 2.0 * dx * dy;
                        a.conic[2] += dq * dy * dy;
                    }
                }
            }
            acc
        })
        .collect();

    // merge in fixed tile order
    let mut screen = vec![Screen::default(); splats.len()];
    for (tile, acc) in partials.iter().enumerate() {
        for (slot, s) in acc.iter().enumerate() {
            screen[prep.tiles[tile][slot] as usize].add(s);
        }
    }

    let mut out = RenderGradients::zeros(cloud.len());
    let per_splat: Vec<_> = splats
        .par_iter()
        .zip(screen.par_iter())
        .map(|(sp, sg)| {
            let g = &cloud.points[sp.index as usize];
            let (_, st) = project_full(g, cam).expect("splat was visible in the forward pass");
            (sp.index as usize, chain_to_world(sg, &st, cam, &sp.conic))
        })
        .collect();
    for (i, (m, ls, q, o, c)) in per_splat {
        out.mean[i] = m;
        out.log_scale[i] = ls;
        out.rotation[i] = q;
        out.opacity[i] = o;
        out.color[i] = c;
    }
    Ok(out)
}

type WorldGrad = ([f64; 3], [f64; 3], [f64; 4], f64, [f64; 3]);

fn chain_to_world(sg: &Screen, st: &super::project::ProjectionState, cam: &Camera, conic: &[f64; 3]) -> WorldGrad {
    // full-matrix gradient with respect to the conic, then the 2D covariance
    let gk = [[sg.conic[0], 0.5 * sg.conic[1]], [0.5 * sg.conic[1], sg.conic[2]]];
    let k = [[conic[0], conic[1]], [conic[1], conic[2]]];
    let mut kg = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            kg[i][j] = k[i][0] * gk[0][j] + k[i][1] * gk[1][j];
        }
    }
    let mut g2 = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            g2[i][j] = -(kg[i][0] * k[0][j] + kg[i][1] * k[1][j]);
        }
    }
    let jac = &st.jac;
    // camera-space covariance: J^T G2 J
    let mut gc: Mat3 = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let mut s = 0.0;
            for a in 0..2 {
                for b in 0..2 {
                    s += jac[a][i] * g2[a][b] * jac[b][j];
                }
            }
            gc[i][j] = s;
        }
    }
    // Jacobian: 2 G2 J Sigma_cam
    let mut gj = [[0.0; 3]; 2];
    for a in 0..2 {
        for j in 0..3 {
            let mut s = 0.0;
            for b in 0..2 {
                for m in 0..3 {
                    s += g2[a][b] * jac[b][m] * st.cov_cam[m][j];
                }
            }
            gj[a][j] = 2.0 * s;
        }
    }
    let w = &cam.rotation;
    let g3 = mat_mul(&mat_mul(&transpose(w), &gc), w);
    // Sigma_3 = R S2 R^T
    let rot = &st.rot;
    let mut grot: Mat3 = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            grot[i][j] = 2.0 * (0..3).map(|m| g3[i][m] * rot[m][j]).sum::<f64>() * st.scale2[j];
        }
    }
    let rtgr = mat_mul(&mat_mul(&transpose(rot), &g3), rot);
    let ls = [2.0 * st.scale2[0] * rtgr[0][0], 2.0 * st.scale2[1] * rtgr[1][1], 2.0 * st.scale2[2] * rtgr[2][2]];
    let gq = rotation_grad(&st.q_unit, &grot);
    let qd: f64 = (0..4).map(|i| gq[i] * st.q_unit[i]).sum();
    let mut q = [0.0; 4];
    for i in 0..4 {
        q[i] = (gq[i] - st.q_unit[i] * qd) / st.q_norm;
    }
    // projected mean and Jacobian as functions of the camera-space position
    let [tx, ty, tz] = st.t;
    let (fx, fy) = (cam.fx, cam.fy);
    let tz2 = tz * tz;
    let tz3 = tz2 * tz;
    let dt = [
        sg.mean[0] * fx / tz - gj[0][2] * fx / tz2,
        sg.mean[1] * fy / tz - gj[1][2] * fy / tz2,
        -sg.mean[0] * fx * tx / tz2 - sg.mean[1] * fy * ty / tz2 - gj[0][0] * fx / tz2 + gj[0][2] * 2.0 * fx * tx / tz3
            - gj[1][1] * fy / tz2
            + gj[1][2] * 2.0 * fy * ty / tz3,
    ];
    let mut mean = [0.0; 3];
    for i in 0..3 {
        mean[i] = (0..3).map(|r| w[r][i] * dt[r]).sum();
    }
    (mean, ls, q, sg.opacity, sg.color)
}

/// Hash of every pixel's contributor sequence and alpha-clamp state. Two
/// clouds with equal signatures lie in the same smooth piece of the renderer.
pub fn render_signature(cloud: &GaussianCloud, cam: &Camera) -> u64 {
    let mut timing = RenderTiming::default();
    let prep = prepare::<f64>(cloud, cam, true, &mut timing);
    let cutoff = SIGMA_CUTOFF * SIGMA_CUTOFF;
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |x: u64| {
        h ^= x;
        h = h.wrapping_mul(0x100000001b3);
    };
    for py in 0..cam.height {
        for px in 0..cam.width {
            let tile = (py / TILE) * prep.tiles_x + px / TILE;
            let (cx, cy) = (px as f64 + 0.5, py as f64 + 0.5);
            let mut t = 1.0;
            eat(u64::MAX);
            for &s in &prep.tiles[tile] {
                let sp = &prep.splats[s as usize];
                let q = mahalanobis(&sp.conic, cx - sp.mean[0], cy - sp.mean[1]);
                if q > cutoff {
                    continue;
                }
                let raw = sp.opacity * (-0.5 * q).exp();
                eat(sp.index as u64 * 2 + (raw > ALPHA_MAX) as u64);
                t *= 1.0 - raw.min(ALPHA_MAX);
                if t < T_MIN {
                    break;
                }
            }
        }
    }
    h
}
