use std::sync::Arc;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::gradcheck::{rel_err, tiny_net, FD_STEP};
use crate::graph::{Csr, Graph, Tensor, Var};
use crate::hand::HandSide;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn bind_all(g: &mut Graph, store: &ParamStore) -> Bound {
    Bound::bind(g, store, |_| true, |_| false)
}

/// Largest relative error between the analytic gradient of `sum(w * f(x))`
/// with respect to `x` and central differences.
fn input_gradient_error(x: &Tensor, seed: u64, f: &dyn Fn(&mut Graph, Var) -> Var) -> f64 {
    let eval = |x: &Tensor, w: Option<&Tensor>| {
        let mut g = Graph::new();
        let xv = g.param(x.clone());
        let out = f(&mut g, xv);
        let (r, c) = g.value(out).shape();
        let w = w.cloned().unwrap_or_else(|| random(&mut ChaCha8Rng::seed_from_u64(seed), r, c));
        let wv = g.constant(w.clone());
        let p = g.mul(out, wv);
        let l = g.sum(p);
        let v = g.value(l).item();
        let grad = g.backward_scalar(l).grad(xv);
        (v, grad, w)
    };
    let (_, grad, w) = eval(x, None);
    let scale = grad.max_abs();
    let mut worst = 0.0f64;
    for i in 0..x.data.len() {
        let mut xp = x.clone();
        xp.data[i] += FD_STEP;
        let mut xm = x.clone();
        xm.data[i] -= FD_STEP;
        let num = (eval(&xp, Some(&w)).0 - eval(&xm, Some(&w)).0) / (2.0 * FD_STEP);
        worst = worst.max(rel_err(grad.data[i], num, scale));
    }
    worst
}

#[test]
fn gamma_of_zero_alternates() {
    for bands in 1..5 {
        let e = gamma_encode(&[0.0], bands);
        for (k, v) in e.iter().enumerate() {
            assert_eq!(*v, if k % 2 == 0 { 0.0 } else { 1.0 });
        }
    }
}

#[test]
fn gamma_of_one_single_band() {
    let e = gamma_encode(&[1.0], 1);
    assert!(e[0].abs() < 1e-15);
    assert_eq!(e[1], -1.0);
}

#[test]
fn gamma_derivative_matches_finite_differences() {
    let x = Tensor::scalar(0.37);
    let err = input_gradient_error(&x, 1, &|g, x| g.gamma(x, 6));
    assert!(err < 1e-6, "{err}");
}

#[test]
fn sample_gradient_is_the_bilinear_weight() {
    let shape = MapShape { height: 4, width: 5 };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let map = random(&mut rng, 20, 3);
    for _ in 0..10 {
        let uv = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
        let q = sample_query(shape, uv, 1).unwrap();
        let mut g = Graph::new();
        let m = g.param(map.clone());
        let s = g.sample(m, Arc::new(vec![q]), 1);
        let grad = g.backward_scalar(s).grad(m);
        let mut expect = vec![0.0; 60];
        for (t, w) in q.texels.iter().zip(q.weights) {
            expect[*t as usize * 3 + 1] += w;
        }
        for (i, e) in expect.iter().enumerate() {
            let mut mp = map.clone();
            mp.data[i] += FD_STEP;
            let mut mm = map.clone();
            mm.data[i] -= FD_STEP;
            let num = (sample_map(&mp, shape, uv, 1, 1).unwrap()[0] - sample_map(&mm, shape, uv, 1, 1).unwrap()[0]) / (2.0 * FD_STEP);
            assert!((grad.data[i] - e).abs() < 1e-12);
            assert!(rel_err(grad.data[i], num, 1.0) < 1e-6, "texel entry {i}: {} vs {num}", grad.data[i]);
        }
    }
}

fn pose_store(cfg: &NetConfig, seed: u64) -> ParamStore {
    cfg.init_weights(seed)
}

fn pose_row(rng: &mut ChaCha8Rng, cfg: &NetConfig) -> (Vec<f64>, Vec<f64>, [f64; 2]) {
    let theta = (0..cfg.theta_dim).map(|_| rng.random_range(-0.5..0.5)).collect();
    let camera = (0..CAMERA_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
    (theta, camera, [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
}

#[test]
fn pose_embedding_shape_and_determinism() {
    let cfg = tiny_net();
    let store = pose_store(&cfg, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (theta, camera, summary) = pose_row(&mut rng, &cfg);
    let run = || {
        let mut g = Graph::new();
        let b = bind_all(&mut g, &store);
        let e = encode_pose(&mut g, &b, &cfg, &theta, &camera, summary).unwrap();
        g.value(e).clone()
    };
    let a = run();
    assert_eq!(a.shape(), (1, cfg.pose_dim));
    assert_eq!(a, run());
    let mut g = Graph::new();
    let b = bind_all(&mut g, &store);
    assert!(encode_pose(&mut g, &b, &cfg, &theta[1..], &camera, summary).is_err());
}

#[test]
fn pose_jacobian_matches_finite_differences() {
    let cfg = tiny_net();
    let store = pose_store(&cfg, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for k in 0..5 {
        let (theta, camera, summary) = pose_row(&mut rng, &cfg);
        let row = [theta, camera, summary.to_vec()].concat();
        let x = Tensor::row_vector(row);
        let err = input_gradient_error(&x, k, &|g, x| {
            let b = bind_all(g, &store);
            network::encode_pose_var(g, &b, x)
        });
        assert!(err < 1e-4, "input {k}: {err}");
    }
}

fn ring(n: usize) -> Arc<Csr> {
    Arc::new(Csr::from_lists(&(0..n).map(|i| vec![((i + 1) % n) as u32, ((i + n - 1) % n) as u32]).collect::<Vec<_>>()))
}

fn geometry(store: &ParamStore, cfg: &NetConfig, pos: &Tensor, nbrs: &Arc<Csr>, pe: &Tensor) -> Tensor {
    let mut g = Graph::new();
    let b = bind_all(&mut g, store);
    let p = g.constant(pos.clone());
    let e = g.constant(pe.clone());
    let out = encode_geometry(&mut g, &b, cfg, p, nbrs, e).unwrap();
    g.value(out).clone()
}

#[test]
fn geometry_is_permutation_equivariant() {
    let cfg = tiny_net();
    let store = cfg.init_weights(7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 9;
    let pos = random(&mut rng, n, 3).scaled(0.1);
    let pe = random(&mut rng, 1, cfg.pose_dim);
    let lists: Vec<Vec<u32>> = (0..n).map(|i| vec![((i + 1) % n) as u32, ((i + 3) % n) as u32]).collect();
    let base = geometry(&store, &cfg, &pos, &Arc::new(Csr::from_lists(&lists)), &pe);
    // new index j holds old point perm[j]
    let perm: Vec<usize> = vec![4, 0, 8, 2, 6, 1, 7, 3, 5];
    let mut inv = vec![0; n];
    for (j, &p) in perm.iter().enumerate() {
        inv[p] = j;
    }
    let mut ppos = Tensor::zeros(n, 3);
    let mut plists = Vec::new();
    for (j, &p) in perm.iter().enumerate() {
        ppos.row_mut(j).copy_from_slice(pos.row(p));
        plists.push(lists[p].iter().map(|&q| inv[q as usize] as u32).collect());
    }
    let out = geometry(&store, &cfg, &ppos, &Arc::new(Csr::from_lists(&plists)), &pe);
    for (j, &p) in perm.iter().enumerate() {
        assert_eq!(out.row(j), base.row(p));
    }
}

#[test]
fn identical_points_get_identical_features() {
    let cfg = tiny_net();
    let store = cfg.init_weights(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut pos = random(&mut rng, 4, 3).scaled(0.1);
    let r = pos.row(0).to_vec();
    pos.row_mut(2).copy_from_slice(&r);
    // 0 and 2 share the neighbourhood {1, 3}
    let nbrs = Arc::new(Csr::from_lists(&[vec![1, 3], vec![0], vec![1, 3], vec![2]]));
    let pe = random(&mut rng, 1, cfg.pose_dim);
    let out = geometry(&store, &cfg, &pos, &nbrs, &pe);
    assert_eq!(out.row(0), out.row(2));
}

#[test]
fn geometry_gradient_in_positions() {
    let cfg = tiny_net();
    let store = cfg.init_weights(11);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let pos = random(&mut rng, 6, 3).scaled(0.2);
    let pe = random(&mut rng, 1, cfg.pose_dim);
    let nbrs = ring(6);
    let err = input_gradient_error(&pos, 3, &|g, x| {
        let b = bind_all(g, &store);
        let e = g.constant(pe.clone());
        encode_geometry(g, &b, &cfg, x, &nbrs, e).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

fn tiny_mesh() -> crate::hand::HandMesh {
    let spec = crate::hand::RigSpec::parse(crate::gradcheck::TINY_RIG).unwrap();
    crate::hand::HandModel::new(&spec, 0).unwrap().canonical(0).clone()
}

fn decode(store: &ParamStore, cfg: &NetConfig, id: &Tensor, pe: &Tensor, plan: &TexturePlan) -> Tensor {
    let mut g = Graph::new();
    let b = bind_all(&mut g, store);
    let i = g.constant(id.clone());
    let e = g.constant(pe.clone());
    let t = decode_texture(&mut g, &b, cfg, i, e, plan).unwrap();
    g.value(t).clone()
}

#[test]
fn zero_final_layer_gives_its_bias() {
    let cfg = tiny_net();
    let mut store = cfg.init_weights(13);
    let bias: Vec<f64> = (0..2 * cfg.feature_dim).map(|k| k as f64 * 0.1 - 0.3).collect();
    store.insert("tex.l3.w", Tensor::zeros(cfg.hidden, 2 * cfg.feature_dim));
    store.insert("tex.l3.b", Tensor::row_vector(bias.clone()));
    let plan = TexturePlan::new(&cfg, &tiny_mesh()).unwrap();
    let t = decode(&store, &cfg, &cfg.zero_identity(), &Tensor::zeros(1, cfg.pose_dim), &plan);
    for r in 0..t.rows {
        assert_eq!(t.row(r), &bias[..]);
    }
}

#[test]
fn decode_is_deterministic() {
    let cfg = tiny_net();
    let store = cfg.init_weights(14);
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let id = random(&mut rng, 64, 8);
    let pe = random(&mut rng, 1, cfg.pose_dim);
    let mesh = tiny_mesh();
    let a = decode(&store, &cfg, &id, &pe, &TexturePlan::new(&cfg, &mesh).unwrap());
    let b = decode(&store, &cfg, &id, &pe, &TexturePlan::new(&cfg, &mesh).unwrap());
    assert_eq!(a, b);
}

#[test]
fn decode_gradient_in_identity() {
    let cfg = tiny_net();
    let store = cfg.init_weights(16);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let id = random(&mut rng, 64, 8);
    let pe = random(&mut rng, 1, cfg.pose_dim);
    let plan = TexturePlan::new(&cfg, &tiny_mesh()).unwrap();
    let err = input_gradient_error(&id, 4, &|g, x| {
        let b = bind_all(g, &store);
        let e = g.constant(pe.clone());
        decode_texture(g, &b, &cfg, x, e, &plan).unwrap()
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn fusion_rules() {
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    let a = random(&mut rng, 5, 4);
    let b = random(&mut rng, 5, 4);
    let mut g = Graph::new();
    let av = g.param(a.clone());
    let bv = g.param(b.clone());
    let z = g.constant(Tensor::zeros(5, 4));
    let f0 = fuse_features(&mut g, av, z).unwrap();
    assert_eq!(g.value(f0), &a);
    let ab = fuse_features(&mut g, av, bv).unwrap();
    let ba = fuse_features(&mut g, bv, av).unwrap();
    assert_eq!(g.value(ab), g.value(ba));
    let s = g.sum(ab);
    let grads = g.backward_scalar(s);
    assert!(grads.grad(av).data.iter().chain(&grads.grad(bv).data).all(|&x| x == 1.0));
    let c = g.constant(Tensor::zeros(4, 4));
    assert!(fuse_features(&mut g, av, c).is_err());
}

fn attend(store: &ParamStore, f: &Tensor, flagged: &[u32]) -> Tensor {
    let mut g = Graph::new();
    let b = bind_all(&mut g, store);
    let fv = g.constant(f.clone());
    let out = interaction_attention(&mut g, &b, fv, flagged);
    g.value(out).clone()
}

#[test]
fn attention_without_flags_is_identity() {
    let cfg = tiny_net();
    let store = cfg.init_weights(19);
    let f = random(&mut ChaCha8Rng::seed_from_u64(20), 7, cfg.feature_dim);
    assert_eq!(attend(&store, &f, &[]), f);
}

#[test]
fn singleton_attention_closed_form() {
    let cfg = tiny_net();
    let store = cfg.init_weights(21);
    let f = random(&mut ChaCha8Rng::seed_from_u64(22), 5, cfg.feature_dim);
    let out = attend(&store, &f, &[3]);
    let wv = store.get("attn.v").unwrap();
    let c = cfg.feature_dim;
    for j in 0..c {
        let proj: f64 = (0..c).map(|k| f.at(3, k) * wv.at(k, j)).sum();
        assert!((out.at(3, j) - (f.at(3, j) + proj)).abs() < 1e-14);
    }
    for r in [0, 1, 2, 4] {
        assert_eq!(out.row(r), f.row(r));
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let cfg = tiny_net();
    let store = cfg.init_weights(23);
    let f = random(&mut ChaCha8Rng::seed_from_u64(24), 8, cfg.feature_dim);
    let a = attend(&store, &f, &[1, 4, 6]);
    let b = attend(&store, &f, &[6, 1, 4]);
    for r in 0..8 {
        for (x, y) in a.row(r).iter().zip(b.row(r)) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}

#[test]
fn attention_gradient_in_features() {
    let cfg = tiny_net();
    let store = cfg.init_weights(25);
    let f = random(&mut ChaCha8Rng::seed_from_u64(26), 6, cfg.feature_dim);
    let err = input_gradient_error(&f, 5, &|g, x| {
        let b = bind_all(g, &store);
        interaction_attention(g, &b, x, &[0, 2, 5])
    });
    assert!(err < 1e-4, "{err}");
}

#[test]
fn point_queries_pick_the_hand_half() {
    let cfg = tiny_net();
    let q = point_queries(&cfg, &[[0.5, 0.5], [0.5, 0.5]], &[HandSide::Left, HandSide::Right]).unwrap();
    assert_eq!(q[0].col, 0);
    assert_eq!(q[1].col as usize, cfg.feature_dim);
}

#[test]
fn pose_embedding_ignores_shape() {
    use crate::optimize::{Avatar, ModelConfig};
    let avatar = Avatar::init(ModelConfig::default(), 1, 0).unwrap();
    let cam = crate::raster::Camera::look_at([0.0, 0.6, 0.1], [0.0, 0.0, 0.09], [0.0, 0.0, 1.0], 45.0, 16, 16);
    let mut pose = crate::hand::PoseParams::default();
    let a = avatar.prepare(0, &pose, &cam).unwrap();
    pose.hands[0].beta[0] = 0.05;
    pose.hands[1].beta[6] = -0.05;
    let b = avatar.prepare(0, &pose, &cam).unwrap();
    assert_ne!(a.posed, b.posed);
    assert_eq!(a.pose_input, b.pose_input);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sampling_is_linear(seed in 0u64..1000, alpha in -3.0f64..3.0, beta in -3.0f64..3.0, u in 0.0f64..=1.0, v in 0.0f64..=1.0) {
        let shape = MapShape { height: 6, width: 7 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random(&mut rng, 42, 4);
        let b = random(&mut rng, 42, 4);
        let mix = Tensor::from_vec(42, 4, a.data.iter().zip(&b.data).map(|(x, y)| alpha * x + beta * y).collect());
        let sa = sample_map(&a, shape, [u, v], 0, 4).unwrap();
        let sb = sample_map(&b, shape, [u, v], 0, 4).unwrap();
        let sm = sample_map(&mix, shape, [u, v], 0, 4).unwrap();
        for k in 0..4 {
            prop_assert!((sm[k] - (alpha * sa[k] + beta * sb[k])).abs() <= 1e-12);
        }
    }

    #[test]
    fn attention_leaves_unflagged_rows(seed in 0u64..1000, mask in 0u32..256) {
        let cfg = tiny_net();
        let store = cfg.init_weights(seed);
        let f = random(&mut ChaCha8Rng::seed_from_u64(seed + 1), 8, cfg.feature_dim);
        let flagged: Vec<u32> = (0..8).filter(|i| mask >> i & 1 == 1).collect();
        let out = attend(&store, &f, &flagged);
        for r in 0..8u32 {
            if !flagged.contains(&r) {
                prop_assert_eq!(out.row(r as usize), f.row(r as usize));
            }
        }
    }
}
