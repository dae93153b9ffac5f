//! Stage-one training of the network and the per-subject identity maps.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adam::Adam;
use super::losses::LossWeights;
use super::model::{Avatar, FrameGeometry, LossSetup, LossTerms, Refine, Target};
use crate::error::{Error, Result};
use crate::features::identity_block;
use crate::gaussians::RefinePlan;
use crate::graph::{Graph, Tensor};
use crate::hand::PoseParams;
use crate::raster::Camera;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// Cloud level for the first part of training.
    pub coarse_level: usize,
    /// Cloud level after the switch.
    pub fine_level: usize,
    /// Fraction of the steps spent at the coarse level.
    pub coarse_fraction: f64,
    pub refine: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            lr: 1e-4,
            weights: LossWeights::default(),
            seed: 0,
            coarse_level: 1,
            fine_level: 2,
            coarse_fraction: 5.0 / 8.0,
            refine: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch size must be positive".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.coarse_fraction) {
            return Err(Error::Invalid("learning rate must be nonnegative and the coarse fraction in [0, 1]".into()));
        }
        if self.fine_level < self.coarse_level {
            return Err(Error::Invalid("fine level must not be coarser than the coarse level".into()));
        }
        Ok(())
    }
}

/// One training view.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Subject id, starting at 1.
    pub subject: usize,
    pub pose: PoseParams,
    pub camera: Camera,
    pub rgb: Vec<f64>,
}

pub struct Trainer {
    pub avatar: Avatar,
    pub config: TrainConfig,
    samples: Vec<Sample>,
    level: usize,
    geometry: Vec<Option<FrameGeometry>>,
    plans: Vec<Option<RefinePlan>>,
    adam: Adam,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    pub trace: Vec<LossTerms>,
}

type SampleResult = (LossTerms, Vec<(String, Tensor)>, RefinePlan);

impl Trainer {
    /// Adds a zero identity map for every subject that has none yet.
    pub fn new(mut avatar: Avatar, samples: Vec<Sample>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        if samples.is_empty() {
            return Err(Error::Invalid("no training samples".into()));
        }
        if config.fine_level > avatar.max_level() {
            return Err(Error::Invalid(format!("fine level {} exceeds the model's {}", config.fine_level, avatar.max_level())));
        }
        for s in &samples {
            if s.subject == 0 {
                return Err(Error::Invalid("subject ids start at 1".into()));
            }
            let name = identity_block(s.subject);
            if avatar.weights.get(&name).is_none() {
                avatar.weights.insert(name, avatar.config.net.zero_identity());
            }
        }
        let n = samples.len();
        Ok(Trainer {
            avatar,
            config,
            samples,
            level: config.coarse_level,
            geometry: vec![None; n],
            plans: vec![None; n],
            adam: Adam::new(),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            order: Vec::new(),
            cursor: 0,
            trace: Vec::new(),
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn level(&self) -> usize {
        self.level
    }

    pub fn set_level(&mut self, level: usize) -> Result<()> {
        if level > self.avatar.max_level() {
            return Err(Error::Invalid(format!("level {level} exceeds the model's {}", self.avatar.max_level())));
        }
        if level != self.level {
            self.level = level;
            self.geometry.iter_mut().for_each(|g| *g = None);
            self.plans.iter_mut().for_each(|p| *p = None);
        }
        Ok(())
    }

    fn geometry(&mut self, i: usize) -> Result<()> {
        if self.geometry[i].is_none() {
            let s = &self.samples[i];
            self.geometry[i] = Some(self.avatar.prepare(self.level, &s.pose, &s.camera)?);
        }
        Ok(())
    }

    fn evaluate_sample(&self, i: usize) -> Result<SampleResult> {
        let s = &self.samples[i];
        let frame = self.geometry[i].as_ref().expect("geometry prepared");
        let name = identity_block(s.subject);
        let mut g = Graph::new();
        let b = self.avatar.bind_network(&mut g, true);
        let id = g.param(self.avatar.weights.require(&name)?.clone());
        let refine = match (&self.plans[i], self.config.refine) {
            (_, false) => Refine::Off,
            (Some(p), true) => Refine::Fixed(p),
            (None, true) => Refine::Compute,
        };
        let setup = LossSetup { weights: self.config.weights, use_mask: false, calibration: None, reg_gradient: false };
        let target = Target { rgb: s.rgb.clone(), mask: None };
        let ev = self.avatar.evaluate(&mut g, &b, id, None, frame, refine, &target, &setup)?;
        let mut grads = ev.grads;
        let mut out: Vec<(String, Tensor)> = b.iter().map(|(n, v)| (n.to_string(), grads.grad(v))).collect();
        out.push((name, grads.take(id)));
        Ok((ev.terms, out, ev.plan))
    }

    /// One optimizer step over the given sample indices. Samples are
    /// evaluated in parallel; their gradients are averaged in batch order.
    pub fn stage1_step(&mut self, batch: &[usize], lr: f64) -> Result<LossTerms> {
        if batch.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        for &i in batch {
            if i >= self.samples.len() {
                return Err(Error::Invalid(format!("sample {i} out of range")));
            }
            self.geometry(i)?;
        }
        let results: Vec<Result<SampleResult>> = batch.par_iter().map(|&i| self.evaluate_sample(i)).collect();
        let mut terms = LossTerms::default();
        let mut sum: Vec<(String, Tensor)> = Vec::new();
        let inv = 1.0 / batch.len() as f64;
        for (&i, r) in batch.iter().zip(results) {
            let (t, grads, plan) = r?;
            terms.rgb += t.rgb * inv;
            terms.perceptual += t.perceptual * inv;
            terms.total += t.total * inv;
            if self.config.refine && self.plans[i].is_none() {
                self.plans[i] = Some(plan);
            }
            for (name, gt) in grads {
                match sum.iter_mut().find(|(n, _)| *n == name) {
                    Some((_, acc)) => acc.add_assign(&gt),
                    None => sum.push((name, gt)),
                }
            }
        }
        for (_, t) in &mut sum {
            t.data.iter_mut().for_each(|v| *v *= inv);
        }
        self.adam.update(&mut self.avatar.weights, &sum, lr);
        Ok(terms)
    }

    fn next_batch(&mut self) -> Vec<usize> {
        let mut batch = Vec::with_capacity(self.config.batch_size);
        while batch.len() < self.config.batch_size.min(self.samples.len()) {
            if self.cursor >= self.order.len() {
                // new epoch: reshuffle and let refinement plans be recomputed
                self.order = (0..self.samples.len()).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
                self.plans.iter_mut().for_each(|p| *p = None);
            }
            batch.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        batch
    }

    /// Runs `steps` optimizer steps with the coarse-to-fine level schedule.
    pub fn train(&mut self, steps: usize) -> Result<&[LossTerms]> {
        let switch = (self.config.coarse_fraction * steps as f64).round() as usize;
        for step in 0..steps {
            let level = if step < switch { self.config.coarse_level } else { self.config.fine_level };
            self.set_level(level)?;
            let batch = self.next_batch();
            let t = self.stage1_step(&batch, self.config.lr)?;
            log::debug!("train step {step}: {}", t.csv());
            self.trace.push(t);
        }
        Ok(&self.trace)
    }

    pub fn trace_csv(&self) -> String {
        let mut s = format!("step,{}\n", LossTerms::CSV_HEADER);
        for (i, t) in self.trace.iter().enumerate() {
            s.push_str(&format!("{i},{}\n", t.csv()));
        }
        s
    }
}
