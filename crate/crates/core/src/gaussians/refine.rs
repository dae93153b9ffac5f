//! Validity-gated pruning and axis splitting of Gaussians.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::cloud::{Gaussian, GaussianCloud};
use super::heads::{AttrVars, PointMeta};
use crate::error::{Error, Result};
use crate::graph::{rotation_from_quat, Graph, Tensor};
use crate::interaction::InteractionLabels;

/// Scale divisor applied along the split axis.
pub const SPLIT_SHRINK: f64 = 1.6;
/// Validity assigned to freshly split children.
pub const CHILD_VALIDITY: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    /// Prune threshold T_d.
    pub prune_below: f64,
    /// Split threshold T_s.
    pub split_above: f64,
    /// Cap on splits per refinement as a fraction of the cloud; `None` disables the cap.
    pub max_split_fraction: Option<f64>,
    /// Offset clamp radius in meters.
    pub offset_clamp: f64,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        RefinementConfig { prune_below: 0.1, split_above: 0.9, max_split_fraction: Some(0.1), offset_clamp: 0.005 }
    }
}

impl RefinementConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 <= self.prune_below && self.prune_below < self.split_above && self.split_above <= 1.0;
        if !ok {
            return Err(Error::Invalid(format!("need 0 <= T_d < T_s <= 1, got {} and {}", self.prune_below, self.split_above)));
        }
        if let Some(f) = self.max_split_fraction {
            if !(0.0..=1.0).contains(&f) {
                return Err(Error::Invalid(format!("split fraction {f} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn split_cap(&self, n: usize) -> usize {
        match self.max_split_fraction {
            None => usize::MAX,
            Some(f) => ((f * n as f64).floor() as usize).max(1),
        }
    }
}

/// Which points survive unchanged and which are split (and along which axis).
/// Output order is survivors in input order, then two children per split
/// point in parent order (the `+` child first).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefinePlan {
    pub input_len: usize,
    pub survivors: Vec<u32>,
    pub splits: Vec<(u32, u8)>,
}

impl RefinePlan {
    pub fn identity(n: usize) -> Self {
        RefinePlan { input_len: n, survivors: (0..n as u32).collect(), splits: Vec::new() }
    }

    /// If every point would be pruned, the most valid one is kept so the
    /// cloud never empties.
    pub fn compute(validity: &[f64], log_scale: &[[f64; 3]], cfg: &RefinementConfig) -> Self {
        let n = validity.len();
        let mut split: Vec<u32> = (0..n as u32).filter(|&i| validity[i as usize] > cfg.split_above).collect();
        let cap = cfg.split_cap(n);
        if split.len() > cap {
            let mut ranked = split.clone();
            ranked.sort_by(|&a, &b| validity[b as usize].total_cmp(&validity[a as usize]).then(a.cmp(&b)));
            ranked.truncate(cap);
            ranked.sort_unstable();
            split = ranked;
        }
        let mut is_split = vec![false; n];
        for &i in &split {
            is_split[i as usize] = true;
        }
        let mut survivors: Vec<u32> =
            (0..n as u32).filter(|&i| !is_split[i as usize] && !(validity[i as usize] < cfg.prune_below)).collect();
        if survivors.is_empty() && split.is_empty() && n > 0 {
            let best = (0..n).max_by(|&a, &b| validity[a].total_cmp(&validity[b]).then(b.cmp(&a))).unwrap();
            survivors.push(best as u32);
        }
        let splits = split
            .into_iter()
            .map(|i| {
                let s = &log_scale[i as usize];
                let mut k = 0;
                for a in 1..3 {
                    if s[a] > s[k] {
                        k = a;
                    }
                }
                (i, k as u8)
            })
            .collect();
        RefinePlan { input_len: n, survivors, splits }
    }

    pub fn output_len(&self) -> usize {
        self.survivors.len() + 2 * self.splits.len()
    }

    pub fn pruned(&self) -> usize {
        self.input_len - self.survivors.len() - self.splits.len()
    }

    /// Source row of every output point.
    pub fn sources(&self) -> Vec<u32> {
        let mut v = self.survivors.clone();
        for &(p, _) in &self.splits {
            v.push(p);
            v.push(p);
        }
        v
    }

    pub fn is_identity(&self) -> bool {
        self.splits.is_empty() && self.survivors.len() == self.input_len
    }

    /// Applies the plan to graph attributes.
    pub fn apply(&self, g: &mut Graph, a: &AttrVars, meta: &PointMeta) -> (AttrVars, PointMeta) {
        if self.is_identity() {
            return (*a, meta.clone());
        }
        let out_meta = meta.gather(&self.sources());
        let surv = a.gather(g, &Arc::new(self.survivors.clone()));
        if self.splits.is_empty() {
            return (surv, out_meta);
        }
        let parents: Arc<Vec<u32>> = Arc::new(self.splits.iter().flat_map(|&(p, _)| [p, p]).collect());
        let entries = Arc::new(self.splits.iter().flat_map(|&(p, k)| [(p, k, 1.0), (p, k, -1.0)]).collect());
        let kids = a.gather(g, &parents);
        let off = g.axis_offset(a.rotation, a.log_scale, entries);
        let mean = g.add(kids.mean, off);
        let mut shrink = Tensor::zeros(parents.len(), 3);
        for (c, &(_, k)) in self.splits.iter().enumerate() {
            shrink.set(2 * c, k as usize, -SPLIT_SHRINK.ln());
            shrink.set(2 * c + 1, k as usize, -SPLIT_SHRINK.ln());
        }
        let shrink = g.constant(shrink);
        let log_scale = g.add(kids.log_scale, shrink);
        let validity = g.constant(Tensor::filled(parents.len(), 1, CHILD_VALIDITY));
        let cat = |g: &mut Graph, x, y| g.concat_rows(&[x, y]);
        let out = AttrVars {
            mean: cat(g, surv.mean, mean),
            log_scale: cat(g, surv.log_scale, log_scale),
            rotation: cat(g, surv.rotation, kids.rotation),
            opacity: cat(g, surv.opacity, kids.opacity),
            color: cat(g, surv.color, kids.color),
            validity: cat(g, surv.validity, validity),
        };
        (out, out_meta)
    }
}

/// The two children of a split Gaussian.
pub fn split_children(p: &Gaussian, axis: usize) -> [Gaussian; 2] {
    let r = rotation_from_quat(&p.rotation);
    let half = 0.5 * p.log_scale[axis].exp();
    let mut kids = [*p, *p];
    for (c, sign) in [(0, 1.0), (1, -1.0)] {
        for k in 0..3 {
            kids[c].mean[k] = p.mean[k] + sign * half * r[k][axis];
        }
        kids[c].log_scale[axis] = p.log_scale[axis] - SPLIT_SHRINK.ln();
        kids[c].validity = CHILD_VALIDITY;
    }
    kids
}

/// Prunes points with validity below T_d and splits those above T_s.
pub fn refine(cloud: &GaussianCloud, cfg: &RefinementConfig) -> GaussianCloud {
    let validity: Vec<f64> = cloud.points.iter().map(|p| p.validity).collect();
    let scales: Vec<[f64; 3]> = cloud.points.iter().map(|p| p.log_scale).collect();
    let plan = RefinePlan::compute(&validity, &scales, cfg);
    apply_plan(cloud, &plan)
}

pub fn apply_plan(cloud: &GaussianCloud, plan: &RefinePlan) -> GaussianCloud {
    let mut points: Vec<Gaussian> = plan.survivors.iter().map(|&i| cloud.points[i as usize]).collect();
    for &(i, k) in &plan.splits {
        points.extend(split_children(&cloud.points[i as usize], k as usize));
    }
    GaussianCloud { points }
}

/// Labels for a cloud, copied from each point's parent vertex.
pub fn inherit_labels(cloud: &GaussianCloud, parent_labels: &InteractionLabels) -> Result<InteractionLabels> {
    let parents: Vec<u32> = cloud.points.iter().map(|p| p.parent).collect();
    crate::interaction::inherit_from_parents(parent_labels, &parents, &cloud.sides())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hand::HandSide;

    fn cloud(validity: &[f64]) -> GaussianCloud {
        let points = validity
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut g = Gaussian::isotropic([i as f64 * 0.01, 0.0, 0.0], 0.003, 0.6, [0.1, 0.2, 0.3]);
                g.log_scale[1] += 0.2;
                g.validity = v;
                g.parent = i as u32;
                g
            })
            .collect();
        GaussianCloud { points }
    }

    #[test]
    fn mid_validity_is_unchanged() {
        let c = cloud(&[0.5; 6]);
        assert_eq!(refine(&c, &RefinementConfig::default()), c);
    }

    #[test]
    fn low_validity_is_pruned() {
        let c = cloud(&[0.5, 0.05, 0.5]);
        let r = refine(&c, &RefinementConfig::default());
        assert_eq!(r.len(), 2);
        assert_eq!(r.points[1].parent, 2);
    }

    #[test]
    fn high_validity_splits_along_largest_axis() {
        let c = cloud(&[0.5, 0.95, 0.5]);
        let r = refine(&c, &RefinementConfig::default());
        assert_eq!(r.len(), 4);
        let (a, b) = (r.points[2], r.points[3]);
        for k in 0..3 {
            assert!(((a.mean[k] + b.mean[k]) * 0.5 - c.points[1].mean[k]).abs() <= 1e-12);
        }
        assert!((a.mean[1] - c.points[1].mean[1]) > 0.0);
        assert_eq!(a.log_scale[1], c.points[1].log_scale[1] - SPLIT_SHRINK.ln());
        assert_eq!(a.validity, CHILD_VALIDITY);
        assert_eq!(a.color, c.points[1].color);
    }

    #[test]
    fn pruning_everything_keeps_the_best_point() {
        let c = cloud(&[0.01, 0.05, 0.02]);
        let r = refine(&c, &RefinementConfig::default());
        assert_eq!(r.len(), 1);
        assert_eq!(r.points[0].parent, 1);
    }

    #[test]
    fn split_cap_keeps_highest_validity() {
        let v: Vec<f64> = (0..20).map(|i| if i < 5 { 0.91 + i as f64 * 0.01 } else { 0.5 }).collect();
        let plan = RefinePlan::compute(&v, &vec![[0.0; 3]; 20], &RefinementConfig::default());
        assert_eq!(plan.splits.iter().map(|s| s.0).collect::<Vec<_>>(), vec![3, 4]);
    }

    #[test]
    fn graph_plan_matches_plain_refine() {
        let c = cloud(&[0.5, 0.95, 0.05, 0.97]);
        let cfg = RefinementConfig { max_split_fraction: None, ..Default::default() };
        let plain = refine(&c, &cfg);
        let mut g = Graph::new();
        let n = c.len();
        let col = |f: &dyn Fn(&Gaussian) -> Vec<f64>, w| Tensor::from_vec(n, w, c.points.iter().flat_map(f).collect());
        let a = AttrVars {
            mean: g.constant(col(&|p| p.mean.to_vec(), 3)),
            log_scale: g.constant(col(&|p| p.log_scale.to_vec(), 3)),
            rotation: g.constant(col(&|p| p.rotation.to_vec(), 4)),
            opacity: g.constant(col(&|p| vec![p.opacity], 1)),
            color: g.constant(col(&|p| p.color.to_vec(), 3)),
            validity: g.constant(col(&|p| vec![p.validity], 1)),
        };
        let meta = PointMeta { uv: vec![[0.0; 2]; n], side: vec![HandSide::Left; n], parent: (0..n as u32).collect() };
        let v: Vec<f64> = c.points.iter().map(|p| p.validity).collect();
        let s: Vec<[f64; 3]> = c.points.iter().map(|p| p.log_scale).collect();
        let plan = RefinePlan::compute(&v, &s, &cfg);
        let (out, m) = plan.apply(&mut g, &a, &meta);
        assert_eq!(out.cloud(&g, &m), plain);
    }
}
