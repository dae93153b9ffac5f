//! Synthetic multi-subject datasets rendered from procedurally textured clouds.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::poses::{make_pose, pose_schedule, PoseKind};
use super::scene::{camera_rig, SceneFile};
use crate::error::{Error, Result};
use crate::features::{sample_map, MapShape, NetConfig, ParamStore};
use crate::gaussians::{Gaussian, GaussianCloud, COLOR_COLS};
use crate::graph::Tensor;
use crate::hand::{pose_mesh, HandModel, PoseParams};
use crate::optimize::{Avatar, ModelConfig, Refine, Sample};
use crate::raster::{encode_gray_ppm, read_mask, read_ppm, render, write_ppm, Camera};

/// Ground-truth opacity of the procedural clouds.
pub const GT_OPACITY: f64 = 0.9;
/// Ground-truth Gaussian size as a fraction of the mean mesh edge.
pub const GT_SCALE_FRACTION: f64 = 0.6;
const TEXTURE_SIZE: usize = 64;
/// Hidden identity of an avatar-rendered subject, stored next to its scene file.
pub const IDENTITY_FILE: &str = "identity.bin";
pub const IDENTITY_BLOCK: &str = "identity";
const WAVES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub subjects: usize,
    pub poses: usize,
    /// Cameras per pose, taken from the front of the four-view rig.
    pub views: usize,
    pub width: usize,
    pub height: usize,
    pub level: usize,
    pub background: [f64; 3],
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { subjects: 3, poses: 4, views: 4, width: 64, height: 64, level: 1, background: [0.0; 3], seed: 0 }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.subjects == 0 || self.poses == 0 {
            return Err(Error::Invalid("need at least one subject and one pose".into()));
        }
        if self.views == 0 || self.views > 4 {
            return Err(Error::Invalid(format!("views must lie in 1..=4, got {}", self.views)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::Invalid("image size must be positive".into()));
        }
        Ok(())
    }
}

/// A subject's ground-truth appearance: a smooth random RGB map over the uv atlas.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectTexture {
    pub shape: MapShape,
    /// texels x 3
    pub rgb: Tensor,
}

impl SubjectTexture {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let base = [rng.random_range(0.45..0.9), rng.random_range(0.3..0.7), rng.random_range(0.2..0.6)];
        let waves: Vec<[f64; 4]> = (0..3 * WAVES)
            .map(|_| {
                [
                    rng.random_range(-4.0..4.0),
                    rng.random_range(-4.0..4.0),
                    rng.random_range(0.0..std::f64::consts::TAU),
                    rng.random_range(0.03..0.12),
                ]
            })
            .collect();
        let shape = MapShape { height: TEXTURE_SIZE, width: TEXTURE_SIZE };
        let mut rgb = Tensor::zeros(shape.texels(), 3);
        for j in 0..TEXTURE_SIZE {
            for i in 0..TEXTURE_SIZE {
                let u = (i as f64 + 0.5) / TEXTURE_SIZE as f64;
                let v = (j as f64 + 0.5) / TEXTURE_SIZE as f64;
                for c in 0..3 {
                    let s: f64 = waves[c * WAVES..(c + 1) * WAVES].iter().map(|w| w[3] * (std::f64::consts::TAU * (w[0] * u + w[1] * v) + w[2]).sin()).sum();
                    rgb.set(j * TEXTURE_SIZE + i, c, (base[c] + s).clamp(0.0, 1.0));
                }
            }
        }
        SubjectTexture { shape, rgb }
    }

    pub fn color(&self, uv: [f64; 2]) -> Result<[f64; 3]> {
        let v = sample_map(&self.rgb, self.shape, uv, 0, 3)?;
        Ok([v[0], v[1], v[2]])
    }
}

fn mean_edge(model: &HandModel, level: usize) -> f64 {
    let mesh = model.canonical(level);
    let edges = crate::hand::mesh::unique_edges(&mesh.faces);
    let d: f64 = edges
        .iter()
        .map(|&(a, b)| {
            let (p, q) = (mesh.vertices[a as usize], mesh.vertices[b as usize]);
            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2) + (p[2] - q[2]).powi(2)).sqrt()
        })
        .sum();
    d / edges.len() as f64
}

/// Isotropic Gaussians on the posed mesh, coloured by the subject texture.
pub fn ground_truth_cloud(model: &HandModel, level: usize, pose: &PoseParams, texture: &SubjectTexture) -> Result<GaussianCloud> {
    let mesh = model.canonical(level);
    let posed = pose_mesh(mesh, &model.rig, pose)?;
    let scale = GT_SCALE_FRACTION * mean_edge(model, level);
    let points = posed
        .vertices
        .iter()
        .enumerate()
        .map(|(v, p)| {
            let mut g = Gaussian::isotropic(*p, scale, GT_OPACITY, texture.color(mesh.uv[v])?);
            g.uv = mesh.uv[v];
            g.side = mesh.side[v];
            g.parent = v as u32;
            Ok(g)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(GaussianCloud { points })
}

#[derive(Debug, Clone)]
pub struct Frame {
    pub kind: PoseKind,
    pub pose: PoseParams,
    pub camera: Camera,
    pub rgb: Vec<f64>,
    pub mask: Vec<f64>,
}

/// What a subject's frames were rendered from.
#[derive(Debug, Clone, PartialEq)]
pub enum Appearance {
    /// Procedural colour map on a cloud of mesh-vertex Gaussians.
    Texture(SubjectTexture),
    /// Hidden identity map decoded by an avatar's network.
    Identity(Tensor),
}

#[derive(Debug, Clone)]
pub struct SubjectData {
    pub id: usize,
    pub appearance: Appearance,
    pub frames: Vec<Frame>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub subjects: Vec<SubjectData>,
}

fn subject_seed(seed: u64, subject: usize) -> u64 {
    seed.wrapping_mul(0x9e3779b97f4a7c15).wrapping_add(subject as u64)
}

/// A smooth random identity map: a few low-frequency waves per channel.
pub fn hidden_identity(net: &NetConfig, seed: u64, amplitude: f64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (net.map_height, net.map_width, 2 * net.feature_dim);
    let waves: Vec<[f64; 4]> = (0..c)
        .map(|_| [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(0.0..std::f64::consts::TAU), rng.random_range(-0.3..0.3)])
        .collect();
    let mut t = Tensor::zeros(h * w, c);
    for j in 0..h {
        for i in 0..w {
            let u = (i as f64 + 0.5) / w as f64;
            let v = (j as f64 + 0.5) / h as f64;
            for (k, wv) in waves.iter().enumerate() {
                t.set(j * w + i, k, amplitude * ((std::f64::consts::PI * (wv[0] * u + wv[1] * v) + wv[2]).sin() + wv[3]));
            }
        }
    }
    t
}

fn build(model: &HandModel, cfg: &DatasetConfig, mut appearance: impl FnMut(&mut ChaCha8Rng, usize) -> Appearance, mut draw: impl FnMut(&Appearance, &PoseParams, &Camera) -> Result<(Vec<f64>, Vec<f64>)>) -> Result<Dataset> {
    cfg.validate()?;
    if cfg.level > model.max_level() {
        return Err(Error::Invalid(format!("level {} exceeds the model's {}", cfg.level, model.max_level())));
    }
    let cams = camera_rig(cfg.width, cfg.height);
    let mut subjects = Vec::with_capacity(cfg.subjects);
    for s in 1..=cfg.subjects {
        let mut rng = ChaCha8Rng::seed_from_u64(subject_seed(cfg.seed, s));
        let look = appearance(&mut rng, s);
        let mut frames = Vec::new();
        for kind in pose_schedule(cfg.poses) {
            let pose = make_pose(model, kind, &mut rng)?;
            for cam in &cams[..cfg.views] {
                let (rgb, mask) = draw(&look, &pose, cam)?;
                frames.push(Frame { kind, pose: pose.clone(), camera: cam.clone(), rgb, mask });
            }
        }
        subjects.push(SubjectData { id: s, appearance: look, frames });
    }
    Ok(Dataset { config: *cfg, subjects })
}

/// Builds the dataset in memory from procedurally textured clouds.
pub fn synthesize(model: &HandModel, cfg: &DatasetConfig) -> Result<Dataset> {
    build(
        model,
        cfg,
        |rng, _| Appearance::Texture(SubjectTexture::random(rng.random())),
        |look, pose, cam| {
            let Appearance::Texture(texture) = look else { unreachable!("procedural subjects carry a texture") };
            let cloud = ground_truth_cloud(model, cfg.level, pose, texture)?;
            let img = render(&cloud, cam, cfg.background)?;
            Ok((img.rgb, img.alpha))
        },
    )
}

/// A randomly initialized avatar whose colour logits are scaled by `color_gain`.
/// A fresh network maps identity maps to nearly uniform colours; the gain
/// widens that range so avatar-rendered subjects look distinct.
pub fn generator_avatar(config: ModelConfig, max_level: usize, seed: u64, color_gain: f64) -> Result<Avatar> {
    let mut av = Avatar::init(config, max_level, seed)?;
    let w = av.weights.require("head.l2.w")?.clone();
    let b = av.weights.require("head.l2.b")?.clone();
    for (name, mut t) in [("head.l2.w", w), ("head.l2.b", b)] {
        for r in 0..t.rows {
            for c in COLOR_COLS {
                t.set(r, c, t.at(r, c) * color_gain);
            }
        }
        av.weights.insert(name, t);
    }
    Ok(av)
}

/// Builds the dataset by rendering a hidden identity map per subject through
/// `avatar`. Frames use the avatar's background, not `cfg.background`.
pub fn synthesize_from_avatar(avatar: &Avatar, cfg: &DatasetConfig, amplitude: f64) -> Result<Dataset> {
    let net = avatar.config.net;
    build(
        &avatar.hand,
        cfg,
        |rng, _| Appearance::Identity(hidden_identity(&net, rng.random(), amplitude)),
        |look, pose, cam| {
            let Appearance::Identity(id) = look else { unreachable!("avatar subjects carry an identity map") };
            let frame = avatar.prepare(cfg.level, pose, cam)?;
            let (_, img, _) = avatar.render_identity(id, None, &frame, Refine::Compute)?;
            Ok((img.rgb, img.alpha))
        },
    )
}

fn subject_dir(root: &Path, id: usize) -> PathBuf {
    root.join("subjects").join(format!("s{id}"))
}

impl Dataset {
    /// Writes `subjects/s{N}/{frames,masks}/*.ppm` and `scene.txt` per subject.
    pub fn write(&self, root: &Path) -> Result<()> {
        for s in &self.subjects {
            let dir = subject_dir(root, s.id);
            std::fs::create_dir_all(dir.join("frames"))?;
            std::fs::create_dir_all(dir.join("masks"))?;
            let mut scene = SceneFile::new(s.id);
            for (i, f) in s.frames.iter().enumerate() {
                let img = format!("frames/{i:03}.ppm");
                let mask = format!("masks/{i:03}.ppm");
                write_ppm(&dir.join(&img), f.camera.width, f.camera.height, &f.rgb)?;
                std::fs::write(dir.join(&mask), encode_gray_ppm(f.camera.width, f.camera.height, &f.mask)?)?;
                scene.poses.push(f.pose.clone());
                scene.cameras.push(f.camera.clone());
                scene.images.push(img);
                scene.masks.push(mask);
            }
            scene.save(&dir.join("scene.txt"))?;
            match &s.appearance {
                Appearance::Texture(t) => write_ppm(&dir.join("texture.ppm"), t.shape.width, t.shape.height, &t.rgb.data)?,
                Appearance::Identity(id) => {
                    let mut store = ParamStore::new();
                    store.insert(IDENTITY_BLOCK, id.clone());
                    store.save(&dir.join(IDENTITY_FILE))?;
                }
            }
        }
        Ok(())
    }

    pub fn samples(&self) -> Vec<Sample> {
        self.subjects
            .iter()
            .flat_map(|s| {
                s.frames.iter().map(move |f| Sample { subject: s.id, pose: f.pose.clone(), camera: f.camera.clone(), rgb: f.rgb.clone() })
            })
            .collect()
    }
}

/// Renders and writes a dataset.
pub fn gen_synthetic_dataset(root: &Path, model: &HandModel, cfg: &DatasetConfig) -> Result<Dataset> {
    let ds = synthesize(model, cfg)?;
    std::fs::create_dir_all(root).map_err(|e| Error::Invalid(format!("cannot create {}: {e}", root.display())))?;
    ds.write(root)?;
    Ok(ds)
}

/// One frame read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedFrame {
    pub subject: usize,
    pub pose: PoseParams,
    pub camera: Camera,
    pub rgb: Vec<f64>,
    pub mask: Option<Vec<f64>>,
}

/// Reads every subject directory below `root`, sorted by subject id.
pub fn load_dataset(root: &Path) -> Result<Vec<LoadedFrame>> {
    let dir = root.join("subjects");
    let mut ids: Vec<usize> = std::fs::read_dir(&dir)
        .map_err(|e| Error::Invalid(format!("cannot read {}: {e}", dir.display())))?
        .filter_map(|e| e.ok()?.file_name().to_str()?.strip_prefix('s')?.parse().ok())
        .collect();
    ids.sort_unstable();
    let mut out = Vec::new();
    for id in ids {
        let sd = subject_dir(root, id);
        let scene = SceneFile::load(&sd.join("scene.txt"))?;
        if scene.images.is_empty() {
            return Err(Error::Invalid(format!("{} lists no images", sd.display())));
        }
        for i in 0..scene.frame_count() {
            let cam = &scene.cameras[i];
            let (w, h, rgb) = read_ppm(&sd.join(&scene.images[i]))?;
            if (w, h) != (cam.width, cam.height) {
                return Err(Error::Shape(format!("{} is {w}x{h}, camera expects {}x{}", scene.images[i], cam.width, cam.height)));
            }
            let mask = match scene.masks.get(i) {
                Some(m) => Some(read_mask(&sd.join(m))?.2),
                None => None,
            };
            out.push(LoadedFrame { subject: scene.subject, pose: scene.poses[i].clone(), camera: cam.clone(), rgb, mask });
        }
    }
    Ok(out)
}
