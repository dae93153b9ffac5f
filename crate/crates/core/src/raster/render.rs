//! Tile-based front-to-back splatting (forward pass).

use std::time::Instant;

use num_traits::Float;
use rayon::prelude::*;

use super::camera::Camera;
use super::project::{project_full, SIGMA_CUTOFF};
use crate::error::Result;
use crate::gaussians::GaussianCloud;

pub const TILE: usize = 16;
pub const ALPHA_MAX: f64 = 0.99;
/// Compositing stops once transmittance falls below this.
pub const T_MIN: f64 = 1e-4;

#[derive(Debug, Clone, Copy)]
pub(crate) struct Splat<F> {
    pub index: u32,
    pub mean: [F; 2],
    pub conic: [F; 3],
    pub opacity: F,
    pub color: [F; 3],
}

/// Depth-sorted splats and their per-tile lists.
pub(crate) struct Prepared<F> {
    pub splats: Vec<Splat<F>>,
    pub tiles: Vec<Vec<u32>>,
    pub tiles_x: usize,
    pub culled: usize,
}

#[inline]
fn c<F: Float>(x: f64) -> F {
    F::from(x).unwrap()
}

/// With `bin == false` every visible splat is kept and no tile lists are built.
pub(crate) fn prepare<F: Float>(cloud: &GaussianCloud, cam: &Camera, bin: bool, timing: &mut RenderTiming) -> Prepared<F> {
    let t0 = Instant::now();
    let projected: Vec<_> = cloud
        .points
        .par_iter()
        .enumerate()
        .filter_map(|(i, g)| project_full(g, cam).map(|(p, _)| (i as u32, p)))
        .collect();
    let culled = cloud.len() - projected.len();
    let mut order: Vec<usize> = (0..projected.len()).collect();
    order.sort_by(|&a, &b| projected[a].1.depth.total_cmp(&projected[b].1.depth).then(projected[a].0.cmp(&projected[b].0)));
    timing.project_ms += t0.elapsed().as_secs_f64() * 1e3;

    let t1 = Instant::now();
    let tiles_x = cam.width.div_ceil(TILE);
    let tiles_y = cam.height.div_ceil(TILE);
    let mut tiles: Vec<Vec<u32>> = vec![Vec::new(); tiles_x * tiles_y];
    let mut splats = Vec::with_capacity(order.len());
    for &o in &order {
        let (index, p) = projected[o];
        let g = &cloud.points[index as usize];
        // pixels whose centres may fall inside the cutoff ellipse, plus one pixel of slack
        let r = p.radius + 1.0;
        let x0 = (p.mean[0] - r - 0.5).ceil().max(0.0);
        let x1 = (p.mean[0] + r - 0.5).floor().min(cam.width as f64 - 1.0);
        let y0 = (p.mean[1] - r - 0.5).ceil().max(0.0);
        let y1 = (p.mean[1] + r - 0.5).floor().min(cam.height as f64 - 1.0);
        let on_screen = x0 <= x1 && y0 <= y1;
        if bin && !on_screen {
            continue;
        }
        let s = splats.len() as u32;
        splats.push(Splat {
            index,
            mean: [c(p.mean[0]), c(p.mean[1])],
            conic: [c(p.conic[0]), c(p.conic[1]), c(p.conic[2])],
            opacity: c(g.opacity),
            color: [c(g.color[0]), c(g.color[1]), c(g.color[2])],
        });
        if !bin {
            continue;
        }
        let (tx0, tx1) = (x0 as usize / TILE, x1 as usize / TILE);
        let (ty0, ty1) = (y0 as usize / TILE, y1 as usize / TILE);
        for ty in ty0..=ty1 {
            for tx in tx0..=tx1 {
                tiles[ty * tiles_x + tx].push(s);
            }
        }
    }
    timing.bin_ms += t1.elapsed().as_secs_f64() * 1e3;
    Prepared { splats, tiles, tiles_x, culled }
}

/// Quadratic form of the conic at offset `(dx, dy)`.
#[inline]
pub(crate) fn mahalanobis<F: Float>(conic: &[F; 3], dx: F, dy: F) -> F {
    conic[0] * dx * dx + c::<F>(2.0) * conic[1] * dx * dy + conic[2] * dy * dy
}

/// Composites one pixel over `list` (indices into `splats`, front to back).
/// Returns colour, final transmittance and contributor count.
#[inline]
pub(crate) fn composite<F: Float>(px: usize, py: usize, list: impl Iterator<Item = u32>, splats: &[Splat<F>]) -> ([F; 3], F, u32) {
    let cx = c::<F>(px as f64 + 0.5);
    let cy = c::<F>(py as f64 + 0.5);
    let cutoff = c::<F>(SIGMA_CUTOFF * SIGMA_CUTOFF);
    let amax = c::<F>(ALPHA_MAX);
    let tmin = c::<F>(T_MIN);
    let half = c::<F>(0.5);
    let mut t = F::one();
    let mut rgb = [F::zero(); 3];
    let mut n = 0;
    for s in list {
        let sp = &splats[s as usize];
        let dx = cx - sp.mean[0];
        let dy = cy - sp.mean[1];
        let q = mahalanobis(&sp.conic, dx, dy);
        if q > cutoff {
            continue;
        }
        let alpha = (sp.opacity * (-half * q).exp()).min(amax);
        let w = alpha * t;
        for k in 0..3 {
            rgb[k] = rgb[k] + sp.color[k] * w;
        }
        t = t * (F::one() - alpha);
        n += 1;
        if t < tmin {
            break;
        }
    }
    (rgb, t, n)
}

/// Wall-clock breakdown of one render, in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct RenderTiming {
    pub project_ms: f64,
    pub bin_ms: f64,
    pub composite_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedImage {
    pub width: usize,
    pub height: usize,
    /// Row-major RGB, three values per pixel.
    pub rgb: Vec<f64>,
    /// Silhouette: accumulated alpha per pixel.
    pub alpha: Vec<f64>,
    pub contributors: Vec<u32>,
    pub culled: usize,
}

impl RenderedImage {
    pub fn transmittance(&self, pixel: usize) -> f64 {
        1.0 - self.alpha[pixel]
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = 3 * (y * self.width + x);
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }
}

fn finish<F: Float>(rgb: [F; 3], t: F, bg: &[f64; 3]) -> ([f64; 3], f64) {
    let t64 = t.to_f64().unwrap();
    let mut out = [0.0; 3];
    for k in 0..3 {
        out[k] = (rgb[k] + c::<F>(bg[k]) * t).to_f64().unwrap();
    }
    (out, 1.0 - t64)
}

/// Tiled render at precision `F`; tiles are composited in parallel and each
/// pixel belongs to exactly one tile.
pub fn render_with<F: Float + Send + Sync>(cloud: &GaussianCloud, cam: &Camera, bg: [f64; 3]) -> Result<(RenderedImage, RenderTiming)> {
    cam.validate()?;
    let mut timing = RenderTiming::default();
    let prep = prepare::<F>(cloud, cam, true, &mut timing);
    let t0 = Instant::now();
    let (w, h) = (cam.width, cam.height);
    let blocks: Vec<Vec<([f64; 3], f64, u32)>> = (0..prep.tiles.len())
        .into_par_iter()
        .map(|tile| {
            let (tx, ty) = (tile % prep.tiles_x, tile / prep.tiles_x);
            let list = &prep.tiles[tile];
            let mut out = Vec::with_capacity(TILE * TILE);
            for py in ty * TILE..((ty + 1) * TILE).min(h) {
                for px in tx * TILE..((tx + 1) * TILE).min(w) {
                    let (rgb, t, n) = composite(px, py, list.iter().copied(), &prep.splats);
                    let (col, a) = finish(rgb, t, &bg);
                    out.push((col, a, n));
                }
            }
            out
        })
        .collect();
    let mut img = RenderedImage { width: w, height: h, rgb: vec![0.0; 3 * w * h], alpha: vec![0.0; w * h], contributors: vec![0; w * h], culled: prep.culled };
    for (tile, block) in blocks.into_iter().enumerate() {
        let (tx, ty) = (tile % prep.tiles_x, tile / prep.tiles_x);
        let mut it = block.into_iter();
        for py in ty * TILE..((ty + 1) * TILE).min(h) {
            for px in tx * TILE..((tx + 1) * TILE).min(w) {
                let (col, a, n) = it.next().unwrap();
                let i = py * w + px;
                img.rgb[3 * i..3 * i + 3].copy_from_slice(&col);
                img.alpha[i] = a;
                img.contributors[i] = n;
            }
        }
    }
    timing.composite_ms = t0.elapsed().as_secs_f64() * 1e3;
    Ok((img, timing))
}

/// Double-precision tiled render.
pub fn render(cloud: &GaussianCloud, cam: &Camera, bg: [f64; 3]) -> Result<RenderedImage> {
    render_with::<f64>(cloud, cam, bg).map(|r| r.0)
}

/// Reference renderer: every pixel scans every splat, no tiling, no threads.
pub fn render_naive(cloud: &GaussianCloud, cam: &Camera, bg: [f64; 3]) -> Result<RenderedImage> {
    cam.validate()?;
    let mut timing = RenderTiming::default();
    let prep = prepare::<f64>(cloud, cam, false, &mut timing);
    let (w, h) = (cam.width, cam.height);
    let mut img = RenderedImage { width: w, height: h, rgb: vec![0.0; 3 * w * h], alpha: vec![0.0; w * h], contributors: vec![0; w * h], culled: prep.culled };
    for py in 0..h {
        for px in 0..w {
            let (rgb, t, n) = composite(px, py, 0..prep.splats.len() as u32, &prep.splats);
            let (col, a) = finish(rgb, t, &bg);
            let i = py * w + px;
            img.rgb[3 * i..3 * i + 3].copy_from_slice(&col);
            img.alpha[i] = a;
            img.contributors[i] = n;
        }
    }
    Ok(img)
}
