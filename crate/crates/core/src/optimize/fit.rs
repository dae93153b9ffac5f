//! One-shot fitting of a new subject from a single reference image.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::losses::LossWeights;
use super::model::{Avatar, ColorCalibration, FrameGeometry, LossSetup, LossTerms, Refine, Target};
use crate::error::{Error, Result};
use crate::gaussians::RefinePlan;
use crate::graph::{Graph, Tensor};
use crate::hand::PoseParams;
use crate::raster::{psnr, Camera};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitConfig {
    pub steps: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub level: usize,
    pub calibrate: bool,
    /// Calibration learning rate relative to `lr`.
    pub calibration_lr_scale: f64,
    /// Optimize the shared texture bias.
    pub texture_bias: bool,
    pub refine: bool,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig { steps: 50, lr: 1e-2, weights: LossWeights::default(), level: 1, calibrate: true, calibration_lr_scale: 0.1, texture_bias: true, refine: true }
    }
}

#[derive(Debug, Clone)]
pub struct FitInput {
    pub pose: PoseParams,
    pub camera: Camera,
    pub rgb: Vec<f64>,
    pub mask: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
pub struct FitReport {
    /// Loss terms evaluated before each update.
    pub trace: Vec<LossTerms>,
    /// Loss terms at the returned parameters.
    pub final_terms: LossTerms,
    /// PSNR of the calibrated render against the reference.
    pub psnr: f64,
    pub wall_ms: f64,
    pub steps: usize,
}

impl FitReport {
    pub fn initial_terms(&self) -> LossTerms {
        self.trace.first().copied().unwrap_or(self.final_terms)
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("step,{}\n", LossTerms::CSV_HEADER);
        for (i, t) in self.trace.iter().enumerate() {
            s.push_str(&format!("{i},{}\n", t.csv()));
        }
        s.push_str(&format!("{},{}\n", self.trace.len(), self.final_terms.csv()));
        s
    }
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub identity: Tensor,
    pub texture_bias: Tensor,
    pub calibration: ColorCalibration,
    /// Refinement plan frozen at the start of fitting.
    pub plan: RefinePlan,
    pub report: FitReport,
}

struct FitState {
    identity: Tensor,
    bias: Tensor,
    calibration: ColorCalibration,
}

fn run(avatar: &Avatar, st: &FitState, frame: &FrameGeometry, plan: &RefinePlan, target: &Target, setup: &LossSetup) -> Result<(LossTerms, Tensor, Tensor, [f64; 6], Vec<f64>)> {
    let mut g = Graph::new();
    let b = avatar.bind_network(&mut g, false);
    let id = g.param(st.identity.clone());
    let bias = g.param(st.bias.clone());
    let ev = avatar.evaluate(&mut g, &b, id, Some(bias), frame, Refine::Fixed(plan), target, setup)?;
    let mut grads = ev.grads;
    let rgb = setup.calibration.unwrap_or_default().apply(&ev.image.rgb);
    Ok((ev.terms, grads.take(id), grads.take(bias), ev.calibration_grad, rgb))
}

/// Optimizes a fresh identity map, texture bias and colour calibration
/// against one reference view. Network weights are only read.
pub fn fit_one_shot(avatar: &Avatar, input: &FitInput, cfg: &FitConfig) -> Result<FitResult> {
    cfg.weights.validate()?;
    if !(cfg.lr >= 0.0) {
        return Err(Error::Invalid("learning rate must be nonnegative".into()));
    }
    let start = Instant::now();
    let frame = avatar.prepare(cfg.level, &input.pose, &input.camera)?;
    let net = &avatar.config.net;
    let mut st = FitState { identity: net.zero_identity(), bias: net.zero_texture_bias(), calibration: ColorCalibration::default() };
    let refine = if cfg.refine { Refine::Compute } else { Refine::Off };
    let (_, initial, plan) = avatar.render_identity(&st.identity, Some(&st.bias), &frame, refine)?;
    let mask = match &input.mask {
        Some(m) => m.clone(),
        None => {
            log::warn!("no reference mask given; using the silhouette of the initial render");
            initial.alpha.clone()
        }
    };
    let target = Target { rgb: input.rgb.clone(), mask: Some(mask) };
    let setup = |c: ColorCalibration| LossSetup {
        weights: cfg.weights,
        use_mask: true,
        calibration: if cfg.calibrate { Some(c) } else { None },
        reg_gradient: true,
    };
    let mut adam = Adam::new();
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (terms, g_id, g_bias, g_cal, _) = run(avatar, &st, &frame, &plan, &target, &setup(st.calibration))?;
        log::debug!("fit step {step}: {}", terms.csv());
        trace.push(terms);
        adam.update_tensor("identity", &mut st.identity, &g_id, cfg.lr);
        if cfg.texture_bias {
            adam.update_tensor("texture_bias", &mut st.bias, &g_bias, cfg.lr);
        }
        if cfg.calibrate {
            let c = &mut st.calibration;
            let mut t = Tensor::row_vector([c.gain, c.bias].concat());
            adam.update_tensor("calibration", &mut t, &Tensor::row_vector(g_cal.to_vec()), cfg.lr * cfg.calibration_lr_scale);
            c.gain.copy_from_slice(&t.data[..3]);
            c.bias.copy_from_slice(&t.data[3..]);
            c.clamp();
        }
    }
    let (final_terms, _, _, _, rgb) = run(avatar, &st, &frame, &plan, &target, &setup(st.calibration))?;
    let report = FitReport { trace, final_terms, psnr: psnr(&rgb, &input.rgb), wall_ms: start.elapsed().as_secs_f64() * 1e3, steps: cfg.steps };
    Ok(FitResult { identity: st.identity, texture_bias: st.bias, calibration: st.calibration, plan, report })
}
