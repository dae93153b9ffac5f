//! Adam with per-block moment buffers.

use std::collections::BTreeMap;

use crate::features::ParamStore;
use crate::graph::Tensor;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
struct Moments {
    m: Tensor,
    v: Tensor,
    step: u64,
}

/// Optimizer state. Each block keeps its own step count so blocks that are
/// only updated occasionally (per-subject identity maps) get correct bias
/// correction.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adam {
    state: BTreeMap<String, Moments>,
    /// Blocks skipped because of non-finite gradients.
    pub skipped: u64,
}

impl Adam {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn step_count(&self, name: &str) -> u64 {
        self.state.get(name).map_or(0, |m| m.step)
    }

    /// Updates one tensor in place. Returns false (and leaves everything
    /// untouched) when the gradient is not finite.
    pub fn update_tensor(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, lr: f64) -> bool {
        assert_eq!(param.shape(), grad.shape(), "gradient shape differs from `{name}`");
        if !grad.is_finite() {
            log::warn!("non-finite gradient for `{name}`; skipping its update");
            self.skipped += 1;
            return false;
        }
        let st = self.state.entry(name.to_string()).or_insert_with(|| Moments {
            m: Tensor::zeros(param.rows, param.cols),
            v: Tensor::zeros(param.rows, param.cols),
            step: 0,
        });
        st.step += 1;
        let c1 = 1.0 - BETA1.powi(st.step as i32);
        let c2 = 1.0 - BETA2.powi(st.step as i32);
        for i in 0..param.data.len() {
            let gi = grad.data[i];
            st.m.data[i] = BETA1 * st.m.data[i] + (1.0 - BETA1) * gi;
            st.v.data[i] = BETA2 * st.v.data[i] + (1.0 - BETA2) * gi * gi;
            let mh = st.m.data[i] / c1;
            let vh = st.v.data[i] / c2;
            param.data[i] -= lr * mh / (vh.sqrt() + EPSILON);
        }
        true
    }

    /// Updates the named blocks of `store`.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[(String, Tensor)], lr: f64) {
        for (name, grad) in grads {
            let param = store.get_mut(name).unwrap_or_else(|| panic!("no parameter block `{name}`"));
            self.update_tensor(name, param, grad, lr);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::from_vec(1, 3, vec![1.0, -2.0, 3.0]);
        let before = p.clone();
        let mut a = Adam::new();
        for _ in 0..3 {
            a.update_tensor("p", &mut p, &Tensor::zeros(1, 3), 0.1);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_matches_hand_computation() {
        let mut p = Tensor::from_vec(1, 2, vec![0.5, 0.5]);
        let g = Tensor::from_vec(1, 2, vec![0.3, -4.0]);
        Adam::new().update_tensor("p", &mut p, &g, 0.01);
        for (k, gi) in [0.3f64, -4.0].iter().enumerate() {
            // m_hat = g, v_hat = g^2
            let expected = 0.5 - 0.01 * gi / (gi.abs() + EPSILON);
            assert!((p.data[k] - expected).abs() < 1e-15);
            assert!((p.data[k] - 0.5).abs() <= 0.01);
        }
    }

    #[test]
    fn nan_gradient_skips_the_block() {
        let mut p = Tensor::from_vec(1, 2, vec![0.5, 0.5]);
        let mut a = Adam::new();
        assert!(!a.update_tensor("p", &mut p, &Tensor::from_vec(1, 2, vec![f64::NAN, 1.0]), 0.1));
        assert_eq!(p.data, vec![0.5, 0.5]);
        assert_eq!(a.skipped, 1);
        assert_eq!(a.step_count("p"), 0);
    }

    #[test]
    fn identical_runs_are_bitwise_equal() {
        let run = || {
            let mut p = Tensor::from_vec(1, 3, vec![0.1, 0.2, 0.3]);
            let mut a = Adam::new();
            for s in 0..20 {
                let g = Tensor::from_vec(1, 3, p.data.iter().map(|x| (x * 7.0 + s as f64).sin()).collect());
                a.update_tensor("p", &mut p, &g, 0.05);
            }
            p
        };
        assert_eq!(run(), run());
    }
}
