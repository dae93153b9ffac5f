//! Command-line front end. `run_command` parses argv and returns the exit code.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{
    camera_rig, gen_synthetic_dataset, generator_avatar, load_avatar, load_dataset, save_avatar, synthesize_from_avatar, ExperimentConfig,
    FittedSubject, PoseFile, SceneFile,
};
use crate::error::{Error, Result};
use crate::features::identity_block;
use crate::gaussians::{Gaussian, GaussianCloud};
use crate::gradcheck::run_suite;
use crate::hand::{pose_mesh, HandModel, HandSide, PoseParams, RigSpec};
use crate::interaction::{brute_force_detect, detect_interactions};
use crate::optimize::{fit_one_shot, Avatar, FitInput, Refine, Sample, Trainer};
use crate::raster::{read_mask, read_ppm, render_with, write_ppm, Camera, RenderTiming};

#[derive(Parser, Debug)]
#[command(name = "handsplat", version, about = "Gaussian splatting avatars for two interacting hands")]
struct Cli {
    /// Seed for every random choice; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (TOML). Defaults are used when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Generator {
    /// Procedurally textured clouds of mesh-vertex Gaussians.
    Procedural,
    /// Hidden identity maps decoded by a random avatar network.
    Model,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Precision {
    F32,
    F64,
    Both,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic multi-subject dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        subjects: Option<usize>,
        #[arg(long)]
        poses: Option<usize>,
        #[arg(long)]
        views: Option<usize>,
        #[arg(long)]
        width: Option<usize>,
        #[arg(long)]
        height: Option<usize>,
        #[arg(long)]
        level: Option<usize>,
        #[arg(long, value_enum, default_value = "procedural")]
        generator: Generator,
        /// Amplitude of the hidden identity maps (model generator).
        #[arg(long, default_value_t = 3.0)]
        amplitude: f64,
        /// Colour-logit gain of the generator network (model generator).
        #[arg(long, default_value_t = 3.0)]
        color_gain: f64,
    },
    /// Stage one: train the shared network and per-subject identity maps.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 200)]
        steps: usize,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        coarse_level: Option<usize>,
        #[arg(long)]
        fine_level: Option<usize>,
    },
    /// Stage two: fit a new subject from one image of a scene file.
    Fit {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        level: Option<usize>,
    },
    /// Render one frame of a scene file to a PPM image.
    Render {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 0)]
        frame: usize,
        #[arg(long)]
        out: PathBuf,
        /// Fit directory; otherwise the trained identity of --subject (or a zero map).
        #[arg(long)]
        fit: Option<PathBuf>,
        #[arg(long)]
        subject: Option<usize>,
        #[arg(long)]
        level: Option<usize>,
    },
    /// Render a fitted subject under every pose of a scene or pose file.
    Animate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fit: PathBuf,
        /// Scene file supplying poses and cameras.
        #[arg(long, conflicts_with = "poses")]
        scene: Option<PathBuf>,
        /// Pose file rendered from one rig view.
        #[arg(long)]
        poses: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        view: usize,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the interaction detector on the frames of a scene file.
    Detect {
        #[arg(long)]
        scene: PathBuf,
        #[arg(long, default_value_t = 1)]
        level: usize,
        /// Only this frame; all frames otherwise.
        #[arg(long)]
        frame: Option<usize>,
        /// Directory for one labels file per frame.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Compare against the brute-force detector.
        #[arg(long)]
        brute_force: bool,
    },
    /// Compare analytic gradients with central differences.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        scenes: usize,
        #[arg(long, default_value_t = 50)]
        gaussians: usize,
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Time the tiled rasterizer on a random cloud; prints CSV.
    Bench {
        #[arg(long, default_value_t = 100_000)]
        gaussians: usize,
        #[arg(long, default_value_t = 256)]
        size: usize,
        #[arg(long, default_value_t = 8)]
        threads: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long, value_enum, default_value = "both")]
        precision: Precision,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Parses `argv` (program name first) and runs the command.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn run(cli: Cli) -> Result<i32> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let seed = cfg.seed;
    match cli.command {
        Command::GenData { out, subjects, poses, views, width, height, level, generator, amplitude, color_gain } => {
            let d = &mut cfg.data;
            d.seed = seed;
            d.subjects = subjects.unwrap_or(d.subjects);
            d.poses = poses.unwrap_or(d.poses);
            d.views = views.unwrap_or(d.views);
            d.width = width.unwrap_or(d.width);
            d.height = height.unwrap_or(d.height);
            d.level = level.unwrap_or(d.level);
            cfg.validate()?;
            std::fs::create_dir_all(&out)?;
            let ds = match generator {
                Generator::Procedural => gen_synthetic_dataset(&out, &HandModel::default_model(cfg.data.level), &cfg.data)?,
                Generator::Model => {
                    let av = generator_avatar(cfg.model, cfg.data.level, seed, color_gain)?;
                    let ds = synthesize_from_avatar(&av, &cfg.data, amplitude)?;
                    ds.write(&out)?;
                    save_avatar(&av, &RigSpec::default_spec(), &out.join("generator.ckpt"))?;
                    ds
                }
            };
            std::fs::write(out.join("config.toml"), cfg.to_annotated_toml()?)?;
            let frames: usize = ds.subjects.iter().map(|s| s.frames.len()).sum();
            println!("wrote {} subjects, {frames} frames to {}", ds.subjects.len(), out.display());
            Ok(0)
        }
        Command::Train { data, out, steps, lr, batch_size, coarse_level, fine_level } => {
            let t = &mut cfg.train;
            t.seed = seed;
            t.lr = lr.unwrap_or(t.lr);
            t.batch_size = batch_size.unwrap_or(t.batch_size);
            t.coarse_level = coarse_level.unwrap_or(t.coarse_level);
            t.fine_level = fine_level.unwrap_or(t.fine_level);
            cfg.validate()?;
            let samples: Vec<Sample> = load_dataset(&data)?
                .into_iter()
                .map(|f| Sample { subject: f.subject, pose: f.pose, camera: f.camera, rgb: f.rgb })
                .collect();
            let avatar = Avatar::init(cfg.model, cfg.train.fine_level, seed)?;
            let mut trainer = Trainer::new(avatar, samples, cfg.train)?;
            let start = Instant::now();
            let trace = trainer.train(steps)?;
            let (first, last) = (trace.first().map_or(f64::NAN, |t| t.total), trace.last().map_or(f64::NAN, |t| t.total));
            println!("trained {steps} steps in {:.1} s; loss {first:.6} -> {last:.6}", start.elapsed().as_secs_f64());
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir)?;
            }
            save_avatar(&trainer.avatar, &RigSpec::default_spec(), &out)?;
            std::fs::write(out.with_extension("loss.csv"), trainer.trace_csv())?;
            Ok(0)
        }
        Command::Fit { checkpoint, scene, frame, out, steps, lr, level } => {
            let avatar = load_avatar(&checkpoint)?;
            let f = &mut cfg.fit;
            f.steps = steps.unwrap_or(f.steps);
            f.lr = lr.unwrap_or(f.lr);
            f.level = level.unwrap_or(f.level).min(avatar.max_level());
            let (sf, base) = load_scene(&scene)?;
            check_frame(&sf, frame)?;
            let image = sf.images.get(frame).ok_or_else(|| Error::Invalid("scene file lists no target images".into()))?;
            let cam = &sf.cameras[frame];
            let (w, h, rgb) = read_ppm(&base.join(image))?;
            if (w, h) != (cam.width, cam.height) {
                return Err(Error::Shape(format!("{image} is {w}x{h}, camera expects {}x{}", cam.width, cam.height)));
            }
            let mask = sf.masks.get(frame).map(|m| read_mask(&base.join(m))).transpose()?.map(|m| m.2);
            let input = FitInput { pose: sf.poses[frame].clone(), camera: cam.clone(), rgb, mask };
            let r = fit_one_shot(&avatar, &input, &cfg.fit)?;
            let fitted = FittedSubject::from_result(&r, cfg.fit.level);
            fitted.save(&out)?;
            std::fs::write(out.join("loss.csv"), r.report.to_csv())?;
            let img = render_fitted(&avatar, &fitted, &input.pose, cam)?;
            write_ppm(&out.join("render.ppm"), cam.width, cam.height, &img)?;
            let (a, b) = (r.report.initial_terms(), r.report.final_terms);
            println!("fit {} steps in {:.1} s; loss {:.6} -> {:.6}; psnr {:.2} dB", cfg.fit.steps, r.report.wall_ms / 1e3, a.total, b.total, r.report.psnr);
            Ok(0)
        }
        Command::Render { checkpoint, scene, frame, out, fit, subject, level } => {
            let avatar = load_avatar(&checkpoint)?;
            let (sf, _) = load_scene(&scene)?;
            check_frame(&sf, frame)?;
            let (pose, cam) = (&sf.poses[frame], &sf.cameras[frame]);
            let rgb = match fit {
                Some(dir) => render_fitted(&avatar, &FittedSubject::load(&dir)?, pose, cam)?,
                None => {
                    let level = level.unwrap_or(avatar.max_level());
                    let id = match subject {
                        Some(s) => avatar.weights.get(&identity_block(s)).cloned().ok_or(Error::UnknownSubject(s))?,
                        None => avatar.config.net.zero_identity(),
                    };
                    let frame = avatar.prepare(level, pose, cam)?;
                    avatar.render_identity(&id, None, &frame, Refine::Compute)?.1.rgb
                }
            };
            write_ppm(&out, cam.width, cam.height, &rgb)?;
            println!("wrote {}", out.display());
            Ok(0)
        }
        Command::Animate { checkpoint, fit, scene, poses, view, width, height, out } => {
            let avatar = load_avatar(&checkpoint)?;
            let fitted = FittedSubject::load(&fit)?;
            let frames: Vec<(PoseParams, Camera)> = match (scene, poses) {
                (Some(s), _) => {
                    let (sf, _) = load_scene(&s)?;
                    sf.poses.into_iter().zip(sf.cameras).collect()
                }
                (None, Some(p)) => {
                    let rig = camera_rig(width, height);
                    let cam = rig.get(view).ok_or_else(|| Error::Invalid(format!("view must be below {}", rig.len())))?.clone();
                    PoseFile::load(&p)?.poses.into_iter().map(|p| (p, cam.clone())).collect()
                }
                (None, None) => return Err(Error::Invalid("animate needs --scene or --poses".into())),
            };
            std::fs::create_dir_all(&out)?;
            for (i, (pose, cam)) in frames.iter().enumerate() {
                let rgb = render_fitted(&avatar, &fitted, pose, cam)?;
                write_ppm(&out.join(format!("frame_{i:04}.ppm")), cam.width, cam.height, &rgb)?;
            }
            println!("wrote {} frames to {}", frames.len(), out.display());
            Ok(0)
        }
        Command::Detect { scene, level, frame, out, brute_force } => {
            let (sf, base) = load_scene(&scene)?;
            let model = HandModel::new(&sf.rig_spec(&base)?, level)?;
            let mesh = model.canonical(level);
            let det = cfg.model.detection;
            let which: Vec<usize> = match frame {
                Some(f) => {
                    check_frame(&sf, f)?;
                    vec![f]
                }
                None => (0..sf.frame_count()).collect(),
            };
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir)?;
            }
            let mut mismatches = 0;
            for i in which {
                let posed = pose_mesh(mesh, &model.rig, &sf.poses[i])?;
                let start = Instant::now();
                let labels = detect_interactions(&mesh.vertices, &posed.vertices, &mesh.side, &det)?;
                let ms = start.elapsed().as_secs_f64() * 1e3;
                let count = |side: HandSide| labels.flagged().iter().filter(|&&q| mesh.side[q] == side).count();
                print!(
                    "frame {i}: {} points, flagged {} (left {}, right {}, cross-hand {}) in {ms:.1} ms",
                    labels.len(),
                    labels.flagged().len(),
                    count(HandSide::Left),
                    count(HandSide::Right),
                    labels.cross_hand
                );
                if brute_force {
                    let same = brute_force_detect(&mesh.vertices, &posed.vertices, &mesh.side, &det)? == labels;
                    mismatches += usize::from(!same);
                    print!("; brute force {}", if same { "agrees" } else { "DIFFERS" });
                }
                println!();
                if let Some(dir) = &out {
                    let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("labels_{i:04}.bin")))?);
                    labels.write(&mut file)?;
                    file.flush()?;
                }
            }
            Ok(if mismatches == 0 { 0 } else { 1 })
        }
        Command::Gradcheck { scenes, gaussians, size } => {
            let start = Instant::now();
            let suite = run_suite(seed, scenes, gaussians, size)?;
            let mut worst = 0.0f64;
            for e in &suite {
                let s = &e.stats;
                worst = worst.max(s.max_rel);
                println!(
                    "{:<17} checked {:>6} excluded {:>4} max rel err {:.3e} (tol {:.0e}) {}",
                    s.name,
                    s.checked,
                    s.excluded,
                    s.max_rel,
                    e.tolerance,
                    if e.passes() { "ok" } else { "FAIL" }
                );
            }
            println!("max rel err {worst:.3e} over {scenes} scenes in {:.1} s", start.elapsed().as_secs_f64());
            Ok(if suite.iter().all(|e| e.passes()) { 0 } else { 1 })
        }
        Command::Bench { gaussians, size, threads, repeats, precision, out } => {
            let csv = bench(seed, gaussians, size, threads, repeats.max(1), precision)?;
            match out {
                Some(p) => std::fs::write(p, csv)?,
                None => print!("{csv}"),
            }
            Ok(0)
        }
    }
}

fn load_scene(path: &Path) -> Result<(SceneFile, PathBuf)> {
    let sf = SceneFile::load(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((sf, base))
}

fn check_frame(sf: &SceneFile, frame: usize) -> Result<()> {
    if frame >= sf.frame_count() {
        return Err(Error::Invalid(format!("frame {frame} out of range; the scene has {}", sf.frame_count())));
    }
    Ok(())
}

/// Renders a fitted subject with its frozen refinement plan and calibration.
pub fn render_fitted(avatar: &Avatar, fitted: &FittedSubject, pose: &PoseParams, cam: &Camera) -> Result<Vec<f64>> {
    let frame = avatar.prepare(fitted.level, pose, cam)?;
    let (_, img, _) = avatar.render_identity(&fitted.identity, Some(&fitted.texture_bias), &frame, Refine::Fixed(&fitted.plan))?;
    Ok(fitted.calibration.apply(&img.rgb))
}

/// A random cloud in front of a camera, sized so that `n` splats roughly tile the view.
pub fn bench_scene(seed: u64, n: usize, size: usize) -> (GaussianCloud, Camera) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cam = Camera::look_at([0.0, 0.0, -1.0], [0.0; 3], [0.0, 1.0, 0.0], 30.0, size, size);
    let s0 = 0.4 / (n.max(1) as f64).sqrt();
    let points = (0..n)
        .map(|_| {
            let mut q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let qn = q.iter().map(|x| x * x).sum::<f64>().sqrt();
            q.iter_mut().for_each(|x| *x /= qn);
            Gaussian {
                mean: [rng.random_range(-0.25..0.25), rng.random_range(-0.25..0.25), rng.random_range(-0.1..0.1)],
                log_scale: std::array::from_fn(|_| (s0 * rng.random_range(0.5..2.0)).ln()),
                rotation: q,
                opacity: rng.random_range(0.2..0.9),
                color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                validity: 0.5,
                uv: [0.5, 0.5],
                side: HandSide::Left,
                parent: 0,
            }
        })
        .collect();
    (GaussianCloud { points }, cam)
}

pub const BENCH_HEADER: &str = "gaussians,width,height,precision,threads,wall_ms,project_ms,bin_ms,composite_ms";

/// Best-of-`repeats` render timings as CSV, one row per precision.
pub fn bench(seed: u64, n: usize, size: usize, threads: usize, repeats: usize, precision: Precision) -> Result<String> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| Error::Invalid(format!("thread pool: {e}")))?;
    let (cloud, cam) = bench_scene(seed, n, size);
    let bg = [0.0; 3];
    let mut csv = format!("{BENCH_HEADER}\n");
    let precisions: &[&str] = match precision {
        Precision::F32 => &["f32"],
        Precision::F64 => &["f64"],
        Precision::Both => &["f32", "f64"],
    };
    for &p in precisions {
        let mut best: Option<(f64, RenderTiming)> = None;
        for _ in 0..repeats {
            let start = Instant::now();
            let timing = pool.install(|| if p == "f32" { render_with::<f32>(&cloud, &cam, bg) } else { render_with::<f64>(&cloud, &cam, bg) })?.1;
            let ms = start.elapsed().as_secs_f64() * 1e3;
            if best.is_none_or(|(b, _)| ms < b) {
                best = Some((ms, timing));
            }
        }
        let (ms, t) = best.expect("at least one repeat");
        csv.push_str(&format!("{n},{size},{size},{p},{threads},{ms:.3},{:.3},{:.3},{:.3}\n", t.project_ms, t.bin_ms, t.composite_ms));
    }
    Ok(csv)
}
