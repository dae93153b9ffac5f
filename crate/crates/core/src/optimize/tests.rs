use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::identity_block;
use crate::gradcheck::{tiny_avatar, tiny_camera, tiny_pose};
use crate::graph::Tensor;

const SIZE: usize = 24;

fn smooth_identity(avatar: &Avatar, seed: u64, amplitude: f64) -> Tensor {
    let cfg = avatar.config.net;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w, c) = (cfg.map_height, cfg.map_width, 2 * cfg.feature_dim);
    let phase: Vec<[f64; 3]> = (0..c).map(|_| std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU))).collect();
    let mut t = Tensor::zeros(h * w, c);
    for y in 0..h {
        for x in 0..w {
            for (k, p) in phase.iter().enumerate() {
                let u = x as f64 / w as f64;
                let v = y as f64 / h as f64;
                t.set(y * w + x, k, amplitude * ((3.0 * u + p[0]).sin() * (2.0 * v + p[1]).cos() + 0.3 * p[2].sin()));
            }
        }
    }
    t
}

/// Renders of a hidden identity under random poses of the tiny rig.
fn toy_samples(teacher: &Avatar, count: usize, seed: u64) -> Vec<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity = smooth_identity(teacher, seed, 2.0);
    (0..count)
        .map(|_| {
            let pose = tiny_pose(&mut rng);
            let camera = tiny_camera(SIZE);
            let frame = teacher.prepare(0, &pose, &camera).unwrap();
            let (_, img, _) = teacher.render_identity(&identity, None, &frame, Refine::Off).unwrap();
            Sample { subject: 1, pose, camera, rgb: img.rgb }
        })
        .collect()
}

fn toy_config() -> TrainConfig {
    TrainConfig { batch_size: 2, lr: 1e-2, coarse_level: 0, fine_level: 0, ..TrainConfig::default() }
}

fn fit_input(teacher: &Avatar, seed: u64) -> FitInput {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pose = tiny_pose(&mut rng);
    let camera = tiny_camera(SIZE);
    let frame = teacher.prepare(0, &pose, &camera).unwrap();
    let (_, img, _) = teacher.render_identity(&smooth_identity(teacher, seed, 2.0), None, &frame, Refine::Off).unwrap();
    FitInput { pose, camera, rgb: img.rgb, mask: Some(img.alpha) }
}

fn tiny_fit(steps: usize) -> FitConfig {
    FitConfig { steps, level: 0, ..FitConfig::default() }
}

#[test]
fn zero_learning_rate_keeps_weights_bitwise() {
    let student = tiny_avatar(1).unwrap();
    let samples = toy_samples(&tiny_avatar(2).unwrap(), 4, 3);
    let mut t = Trainer::new(student, samples, TrainConfig { lr: 0.0, ..toy_config() }).unwrap();
    let before = t.avatar.weights.clone();
    t.train(5).unwrap();
    assert_eq!(t.avatar.weights, before);
}

#[test]
fn stage_one_halves_the_toy_loss() {
    let student = tiny_avatar(1).unwrap();
    let samples = toy_samples(&tiny_avatar(2).unwrap(), 4, 3);
    let mut t = Trainer::new(student, samples, toy_config()).unwrap();
    let trace = t.train(200).unwrap().to_vec();
    let first = trace[0].total;
    let tail: f64 = trace[trace.len() - 10..].iter().map(|x| x.total).sum::<f64>() / 10.0;
    assert!(tail <= 0.5 * first, "loss went from {first} to {tail}");
    assert!(t.avatar.weights.is_finite());
}

#[test]
fn training_is_deterministic() {
    let run = || {
        let samples = toy_samples(&tiny_avatar(2).unwrap(), 4, 3);
        let mut t = Trainer::new(tiny_avatar(1).unwrap(), samples, toy_config()).unwrap();
        t.train(6).unwrap();
        (t.avatar.weights.checksum(), t.trace_csv())
    };
    assert_eq!(run(), run());
}

#[test]
fn trainer_adds_identity_maps() {
    let samples = toy_samples(&tiny_avatar(2).unwrap(), 2, 3);
    let t = Trainer::new(tiny_avatar(1).unwrap(), samples, toy_config()).unwrap();
    assert_eq!(t.avatar.weights.get(&identity_block(1)).unwrap(), &t.avatar.config.net.zero_identity());
}

#[test]
fn trainer_rejects_bad_input() {
    let samples = toy_samples(&tiny_avatar(2).unwrap(), 2, 3);
    assert!(Trainer::new(tiny_avatar(1).unwrap(), Vec::new(), toy_config()).is_err());
    assert!(Trainer::new(tiny_avatar(1).unwrap(), samples.clone(), TrainConfig { fine_level: 1, ..toy_config() }).is_err());
    assert!(Trainer::new(tiny_avatar(1).unwrap(), samples, TrainConfig { batch_size: 0, ..toy_config() }).is_err());
}

#[test]
fn fit_with_zero_steps_is_the_baseline() {
    let avatar = tiny_avatar(1).unwrap();
    let input = fit_input(&tiny_avatar(2).unwrap(), 5);
    let r = fit_one_shot(&avatar, &input, &tiny_fit(0)).unwrap();
    assert_eq!(r.identity, avatar.config.net.zero_identity());
    assert_eq!(r.texture_bias, avatar.config.net.zero_texture_bias());
    assert_eq!(r.calibration, ColorCalibration::default());
    let frame = avatar.prepare(0, &input.pose, &input.camera).unwrap();
    let (_, img, _) = avatar.render_identity(&r.identity, Some(&r.texture_bias), &frame, Refine::Fixed(&r.plan)).unwrap();
    assert_eq!(r.report.psnr, crate::raster::psnr(&img.rgb, &input.rgb));
}

#[test]
fn fit_does_not_touch_network_weights() {
    let avatar = tiny_avatar(1).unwrap();
    let sum = avatar.weights.checksum();
    let input = fit_input(&tiny_avatar(2).unwrap(), 5);
    fit_one_shot(&avatar, &input, &tiny_fit(5)).unwrap();
    assert_eq!(avatar.weights.checksum(), sum);
}

#[test]
fn fit_reduces_the_image_loss() {
    let avatar = tiny_avatar(1).unwrap();
    let input = fit_input(&tiny_avatar(2).unwrap(), 5);
    let r = fit_one_shot(&avatar, &input, &tiny_fit(40)).unwrap();
    let a = r.report.initial_terms();
    let b = r.report.final_terms;
    assert!(b.total < a.total, "{} -> {}", a.total, b.total);
    assert!(b.rgb < a.rgb);
}

#[test]
fn huge_regularizer_pins_the_texture_bias() {
    let avatar = tiny_avatar(1).unwrap();
    let input = fit_input(&tiny_avatar(2).unwrap(), 5);
    let mut cfg = tiny_fit(200);
    cfg.weights.reg = 1e9;
    let r = fit_one_shot(&avatar, &input, &cfg).unwrap();
    let norm = r.texture_bias.sum_squares().sqrt();
    assert!(norm < 1e-3, "texture bias norm {norm}");
}

#[test]
fn loss_terms_sum_to_total() {
    let avatar = tiny_avatar(1).unwrap();
    let input = fit_input(&tiny_avatar(2).unwrap(), 5);
    let r = fit_one_shot(&avatar, &input, &tiny_fit(5)).unwrap();
    for t in r.report.trace.iter().chain([&r.report.final_terms]) {
        assert!((t.sum() - t.total).abs() <= 1e-9, "{t:?}");
    }
    let csv = r.report.to_csv();
    assert_eq!(csv.lines().count(), 7);
    assert!(csv.starts_with("step,rgb,perceptual,mask,reg,total"));
}

#[test]
fn fitting_is_deterministic() {
    let avatar = tiny_avatar(1).unwrap();
    let input = fit_input(&tiny_avatar(2).unwrap(), 5);
    let a = fit_one_shot(&avatar, &input, &tiny_fit(4)).unwrap();
    let b = fit_one_shot(&avatar, &input, &tiny_fit(4)).unwrap();
    assert_eq!(a.identity, b.identity);
    assert_eq!(a.texture_bias, b.texture_bias);
    assert_eq!(a.calibration, b.calibration);
    assert_eq!(a.report.trace, b.report.trace);
}

#[test]
fn fit_without_mask_uses_initial_silhouette() {
    let avatar = tiny_avatar(1).unwrap();
    let mut input = fit_input(&tiny_avatar(2).unwrap(), 5);
    input.mask = None;
    let r = fit_one_shot(&avatar, &input, &tiny_fit(2)).unwrap();
    assert!(r.report.final_terms.total.is_finite());
}

#[test]
fn default_calibration_is_identity() {
    let rgb: Vec<f64> = (0..30).map(|i| i as f64 / 29.0).collect();
    assert_eq!(ColorCalibration::default().apply(&rgb), rgb);
    let mut c = ColorCalibration { gain: [-1.0, 0.5, 0.0], bias: [0.0; 3] };
    c.clamp();
    assert_eq!(c.gain, [MIN_GAIN, 0.5, MIN_GAIN]);
}

#[test]
fn calibration_is_applied_per_channel() {
    let c = ColorCalibration { gain: [2.0, 1.0, 0.5], bias: [0.1, 0.0, -0.1] };
    let out = c.apply(&[0.5, 0.5, 0.5, 1.0, 1.0, 1.0]);
    let expect = [1.1, 0.5, 0.15, 2.1, 1.0, 0.4];
    for (a, b) in out.iter().zip(expect) {
        assert!((a - b).abs() < 1e-15);
    }
}

#[test]
fn negative_learning_rate_is_rejected() {
    let avatar = tiny_avatar(1).unwrap();
    let input = fit_input(&tiny_avatar(2).unwrap(), 5);
    let cfg = FitConfig { lr: -1.0, ..tiny_fit(1) };
    assert!(fit_one_shot(&avatar, &input, &cfg).is_err());
}
