use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::{Bound, NetConfig, ParamStore};
use crate::gradcheck::{rel_err, tiny_net, FD_STEP};
use crate::graph::{Graph, Tensor};
use crate::hand::HandSide;
use crate::interaction::InteractionLabels;

fn heads(store: &ParamStore, cfg: &NetConfig, f: &Tensor, base: &Tensor) -> GaussianCloud {
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, store, |_| true, |_| false);
    let fv = g.constant(f.clone());
    let bv = g.constant(base.clone());
    let a = predict_attributes(&mut g, &b, cfg, fv, bv, -5.0).unwrap();
    let n = f.rows;
    let meta = PointMeta { uv: vec![[0.5; 2]; n], side: vec![HandSide::Left; n], parent: (0..n as u32).collect() };
    a.cloud(&g, &meta)
}

fn zero_store(cfg: &NetConfig) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, r, c) in cfg.layer_shapes() {
        s.insert(name, Tensor::zeros(r, c));
    }
    s
}

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, a: f64) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-a..a)).collect())
}

#[test]
fn zero_network_gives_neutral_gaussians() {
    let cfg = tiny_net();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let f = random(&mut rng, 5, cfg.feature_dim, 1.0);
    let base = random(&mut rng, 5, 3, 0.1);
    let c = heads(&zero_store(&cfg), &cfg, &f, &base);
    for (i, p) in c.points.iter().enumerate() {
        assert_eq!(p.mean, [base.at(i, 0), base.at(i, 1), base.at(i, 2)]);
        assert_eq!(p.opacity, 0.5);
        assert_eq!(p.validity, 0.5);
        assert_eq!(p.rotation, [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(p.color, [0.5; 3]);
        assert_eq!(p.log_scale, [-5.0; 3]);
    }
}

#[test]
fn heads_reject_misaligned_rows() {
    let cfg = tiny_net();
    let mut g = Graph::new();
    let b = Bound::bind(&mut g, &zero_store(&cfg), |_| true, |_| false);
    let f = g.constant(Tensor::zeros(4, cfg.feature_dim));
    let base = g.constant(Tensor::zeros(3, 3));
    assert!(predict_attributes(&mut g, &b, &cfg, f, base, 0.0).is_err());
}

#[test]
fn attribute_gradients_match_finite_differences() {
    let cfg = tiny_net();
    let store = cfg.init_weights(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = random(&mut rng, 6, cfg.feature_dim, 1.0);
    let base = random(&mut rng, 6, 3, 0.1);
    // one projection per attribute so each head is checked on its own
    for attr in 0..6 {
        let eval = |f: &Tensor| {
            let mut g = Graph::new();
            let b = Bound::bind(&mut g, &store, |_| true, |_| false);
            let fv = g.param(f.clone());
            let bv = g.constant(base.clone());
            let a = predict_attributes(&mut g, &b, &cfg, fv, bv, -5.0).unwrap();
            let v = a.vars()[attr];
            let (r, c) = g.value(v).shape();
            let w = g.constant(random(&mut ChaCha8Rng::seed_from_u64(attr as u64), r, c, 1.0));
            let p = g.mul(v, w);
            let l = g.sum(p);
            let val = g.value(l).item();
            (val, g.backward_scalar(l).grad(fv))
        };
        let (_, grad) = eval(&f);
        let scale = grad.max_abs();
        for i in 0..f.data.len() {
            let mut fp = f.clone();
            fp.data[i] += FD_STEP;
            let mut fm = f.clone();
            fm.data[i] -= FD_STEP;
            let num = (eval(&fp).0 - eval(&fm).0) / (2.0 * FD_STEP);
            let e = rel_err(grad.data[i], num, scale);
            assert!(e < 1e-4, "attribute {attr} entry {i}: {} vs {num}", grad.data[i]);
        }
    }
}

fn labels(flags: Vec<u8>) -> InteractionLabels {
    let n = flags.len();
    InteractionLabels::from_flags(flags, &vec![HandSide::Left; n], 0)
}

fn line_cloud(validity: &[f64]) -> GaussianCloud {
    GaussianCloud {
        points: validity
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let mut g = Gaussian::isotropic([i as f64 * 0.01, 0.0, 0.0], 0.003, 0.6, [0.2; 3]);
                g.validity = v;
                g.parent = i as u32;
                g
            })
            .collect(),
    }
}

#[test]
fn labels_without_splits_are_unchanged() {
    let l = labels(vec![0, 1, 0, 1]);
    let c = line_cloud(&[0.5; 4]);
    assert_eq!(inherit_labels(&c, &l).unwrap(), l);
}

#[test]
fn split_children_inherit_flags() {
    let l = labels(vec![0, 1, 0]);
    let r = refine(&line_cloud(&[0.5, 0.95, 0.05]), &RefinementConfig::default());
    let out = inherit_labels(&r, &l).unwrap();
    assert_eq!(out.len(), r.len());
    assert_eq!(out.flags, vec![0, 1, 1]);
}

#[test]
fn dangling_parent_is_an_error() {
    let mut c = line_cloud(&[0.5; 2]);
    c.points[1].parent = 7;
    assert!(inherit_labels(&c, &labels(vec![0, 1])).is_err());
}

fn random_cloud(seed: u64, n: usize) -> GaussianCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    GaussianCloud {
        points: (0..n)
            .map(|i| {
                let mut q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                let norm = q.iter().map(|x| x * x).sum::<f64>().sqrt();
                q.iter_mut().for_each(|x| *x /= norm);
                Gaussian {
                    mean: std::array::from_fn(|_| rng.random_range(-0.2..0.2)),
                    log_scale: std::array::from_fn(|_| rng.random_range(-7.0..-3.0)),
                    rotation: q,
                    opacity: rng.random_range(0.01..0.99),
                    color: std::array::from_fn(|_| rng.random_range(0.0..1.0)),
                    validity: rng.random_range(0.0..1.0),
                    uv: [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)],
                    side: HandSide::from_index(i % 2),
                    parent: i as u32,
                }
            })
            .collect(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn offsets_stay_inside_the_clamp(seed in 0u64..10_000, gain in 0.1f64..50.0) {
        let cfg = tiny_net();
        let mut store = cfg.init_weights(seed);
        store.get_mut("head.l2.w").unwrap().data.iter_mut().for_each(|w| *w *= gain);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = random(&mut rng, 8, cfg.feature_dim, 10.0);
        let base = random(&mut rng, 8, 3, 0.1);
        let c = heads(&store, &cfg, &f, &base);
        for (i, p) in c.points.iter().enumerate() {
            let d: f64 = (0..3).map(|k| (p.mean[k] - base.at(i, k)).powi(2)).sum::<f64>().sqrt();
            prop_assert!(d <= cfg.offset_clamp * (1.0 + 1e-12));
            let qn: f64 = p.rotation.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((qn - 1.0).abs() <= 1e-9);
            prop_assert!((0.0..=1.0).contains(&p.opacity) && (0.0..=1.0).contains(&p.validity));
        }
    }

    #[test]
    fn refine_accounting_and_thresholds(seed in 0u64..10_000, n in 1usize..60, capped in any::<bool>()) {
        let cloud = random_cloud(seed, n);
        let cfg = RefinementConfig { max_split_fraction: if capped { Some(0.1) } else { None }, ..Default::default() };
        let v: Vec<f64> = cloud.points.iter().map(|p| p.validity).collect();
        let s: Vec<[f64; 3]> = cloud.points.iter().map(|p| p.log_scale).collect();
        let plan = RefinePlan::compute(&v, &s, &cfg);
        let out = apply_plan(&cloud, &plan);
        prop_assert_eq!(out.len(), n - plan.pruned() + plan.splits.len());
        prop_assert!(!out.is_empty());
        let all_low = v.iter().all(|&x| x < cfg.prune_below);
        for &i in &plan.survivors {
            prop_assert!(all_low || v[i as usize] >= cfg.prune_below);
            prop_assert!(capped || v[i as usize] <= cfg.split_above);
        }
        if !capped {
            let over = v.iter().filter(|&&x| x > cfg.split_above).count();
            prop_assert_eq!(plan.splits.len(), over);
        }
        let base = plan.survivors.len();
        for (c, &(p, _)) in plan.splits.iter().enumerate() {
            let (a, b) = (out.points[base + 2 * c], out.points[base + 2 * c + 1]);
            let parent = cloud.points[p as usize];
            for k in 0..3 {
                prop_assert!(((a.mean[k] + b.mean[k]) * 0.5 - parent.mean[k]).abs() <= 1e-12);
            }
            prop_assert_eq!(a.color, parent.color);
            prop_assert_eq!(b.opacity, parent.opacity);
            prop_assert_eq!(a.rotation, parent.rotation);
        }
        for p in &out.points {
            let qn: f64 = p.rotation.iter().map(|x| x * x).sum::<f64>().sqrt();
            prop_assert!((qn - 1.0).abs() <= 1e-9);
        }
        prop_assert_eq!(refine(&cloud, &cfg), out);
    }
}
