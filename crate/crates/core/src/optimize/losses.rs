//! Image losses built on the compute graph.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub rgb: f64,
    pub perceptual: f64,
    pub mask: f64,
    pub reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { rgb: 10.0, perceptual: 0.1, mask: 1.0, reg: 0.01 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.rgb, self.perceptual, self.mask, self.reg].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Invalid("loss weights must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Mean absolute error.
pub fn l1(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

/// Mean squared error.
pub fn mse(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.square(d);
    g.mean(d)
}

/// Smallest image side accepted by the perceptual loss.
pub const PERCEPTUAL_MIN_SIZE: usize = 16;
const PERCEPTUAL_SEED: u64 = 0x9e3779b97f4a7c15;
const PERCEPTUAL_WIDTH: usize = 8;

/// Fixed random two-level filter bank standing in for a pretrained
/// feature extractor: `tanh(conv)`, 2x2 average pool, `tanh(conv)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Perceptual {
    pub k1: Tensor,
    pub k2: Tensor,
}

impl Default for Perceptual {
    fn default() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(PERCEPTUAL_SEED);
        let mut bank = |cin: usize| {
            let a = (6.0 / (9 * cin + PERCEPTUAL_WIDTH) as f64).sqrt();
            Tensor::from_vec(9 * cin, PERCEPTUAL_WIDTH, (0..9 * cin * PERCEPTUAL_WIDTH).map(|_| rng.random_range(-a..a)).collect())
        };
        let k1 = bank(3);
        let k2 = bank(PERCEPTUAL_WIDTH);
        Perceptual { k1, k2 }
    }
}

impl Perceptual {
    fn features(&self, g: &mut Graph, img: Var, k1: Var, k2: Var, h: usize, w: usize) -> (Var, Var) {
        let f1 = g.conv3x3(img, k1, h, w);
        let f1 = g.tanh(f1);
        let p = g.avg_pool2(f1, h, w);
        let f2 = g.conv3x3(p, k2, h / 2, w / 2);
        (f1, g.tanh(f2))
    }

    /// Sum over both levels of the mean squared feature difference.
    pub fn loss(&self, g: &mut Graph, a: Var, b: Var, h: usize, w: usize) -> Result<Var> {
        if h < PERCEPTUAL_MIN_SIZE || w < PERCEPTUAL_MIN_SIZE {
            return Err(Error::Invalid(format!("perceptual loss needs at least {PERCEPTUAL_MIN_SIZE}x{PERCEPTUAL_MIN_SIZE} images, got {w}x{h}")));
        }
        if g.value(a).shape() != (h * w, 3) || g.value(b).shape() != (h * w, 3) {
            return Err(Error::Shape("perceptual loss inputs must be h*w x 3".into()));
        }
        let k1 = g.constant(self.k1.clone());
        let k2 = g.constant(self.k2.clone());
        let (a1, a2) = self.features(g, a, k1, k2, h, w);
        let (b1, b2) = self.features(g, b, k1, k2, h, w);
        let l1 = mse(g, a1, b1);
        let l2 = mse(g, a2, b2);
        Ok(g.add(l1, l2))
    }
}

fn check_pair(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape(format!("loss inputs have {} and {} values", a.len(), b.len())));
    }
    Ok(())
}

fn scalar_and_grad(a: &[f64], b: &[f64], cols: usize, f: impl Fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<(f64, Vec<f64>)> {
    check_pair(a, b)?;
    if a.len() % cols != 0 {
        return Err(Error::Shape(format!("{} values do not split into rows of {cols}", a.len())));
    }
    let mut g = Graph::new();
    let x = g.param(Tensor::from_vec(a.len() / cols, cols, a.to_vec()));
    let y = g.constant(Tensor::from_vec(b.len() / cols, cols, b.to_vec()));
    let l = f(&mut g, x, y)?;
    let mut grads = g.backward_scalar(l);
    Ok((g.value(l).item(), grads.take(x).data))
}

/// Mean absolute error over all values, with its gradient in the first argument.
pub fn l1_loss(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>)> {
    scalar_and_grad(a, b, 1, |g, x, y| Ok(l1(g, x, y)))
}

/// Mean squared error between two masks.
pub fn mask_loss(m: &[f64], m_ref: &[f64]) -> Result<(f64, Vec<f64>)> {
    if m.iter().chain(m_ref).any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Invalid("mask values must lie in [0, 1]".into()));
    }
    scalar_and_grad(m, m_ref, 1, |g, x, y| Ok(mse(g, x, y)))
}

/// Perceptual loss between two row-major RGB images.
pub fn perceptual_loss(a: &[f64], b: &[f64], h: usize, w: usize) -> Result<(f64, Vec<f64>)> {
    let p = Perceptual::default();
    scalar_and_grad(a, b, 3, |g, x, y| p.loss(g, x, y, h, w))
}
