//! Forward constructors and adjoints for every graph operation.

use std::sync::Arc;

use rayon::prelude::*;

use super::{accumulate, Csr, Graph, Op, Tensor, Var};

/// Above this many multiply-adds a product is split across rayon workers.
const PAR_WORK: usize = 1 << 16;

/// Bilinear lookup precomputed from a UV coordinate: four texel rows and
/// weights, plus the first map column to read.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SampleQuery {
    pub texels: [u32; 4],
    pub weights: [f64; 4],
    pub col: u32,
}

pub(crate) fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::MatMulNT(a, b)
        | Op::AddBias(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::ReplaceRows(a, _, b)
        | Op::AxisOffset(a, b, _)
        | Op::Conv3x3(a, b, _, _) => vec![*a, *b],
        Op::Scale(a, _)
        | Op::Tanh(a)
        | Op::Gamma(a, _)
        | Op::Sigmoid(a)
        | Op::Abs(a)
        | Op::Square(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SliceCols(a, _)
        | Op::GatherRows(a, _)
        | Op::BroadcastRows(a)
        | Op::NeighborMean(a, _)
        | Op::Sample(a, _)
        | Op::ScatterRows(a, _)
        | Op::SoftmaxRows(a)
        | Op::RadialSquash(a, _)
        | Op::NormalizeRows(a)
        | Op::AvgPool2(a, _, _) => vec![*a],
        Op::ConcatCols(vs) | Op::ConcatRows(vs) => vs.clone(),
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor { rows: a.rows, cols: a.cols, data: a.data.iter().map(|&x| f(x)).collect() }
}

fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    assert_eq!(a.shape(), b.shape(), "elementwise shape mismatch");
    Tensor { rows: a.rows, cols: a.cols, data: a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect() }
}

/// `a (n x k) * b (k x m)`.
pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.rows, "matmul inner dimensions differ");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(n, m);
    let row = |i: usize, dst: &mut [f64]| {
        let ar = &a.data[i * k..(i + 1) * k];
        for (p, &av) in ar.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let br = &b.data[p * m..(p + 1) * m];
            for (d, &bv) in dst.iter_mut().zip(br) {
                *d += av * bv;
            }
        }
    };
    if n * k * m >= PAR_WORK && m > 0 {
        out.data.par_chunks_mut(m).enumerate().for_each(|(i, dst)| row(i, dst));
    } else if m > 0 {
        out.data.chunks_mut(m).enumerate().for_each(|(i, dst)| row(i, dst));
    }
    out
}

/// `a (n x k) * b^T` with `b (m x k)`.
pub(crate) fn matmul_nt(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.cols, b.cols, "matmul_nt inner dimensions differ");
    let (n, k, m) = (a.rows, a.cols, b.rows);
    let mut out = Tensor::zeros(n, m);
    let row = |i: usize, dst: &mut [f64]| {
        let ar = &a.data[i * k..(i + 1) * k];
        for (j, d) in dst.iter_mut().enumerate() {
            let br = &b.data[j * k..(j + 1) * k];
            *d = ar.iter().zip(br).map(|(x, y)| x * y).sum();
        }
    };
    if n * k * m >= PAR_WORK && m > 0 {
        out.data.par_chunks_mut(m).enumerate().for_each(|(i, dst)| row(i, dst));
    } else if m > 0 {
        out.data.chunks_mut(m).enumerate().for_each(|(i, dst)| row(i, dst));
    }
    out
}

/// `a^T (k x n) * b (n x m)` with `a (n x k)`.
pub(crate) fn matmul_tn(a: &Tensor, b: &Tensor) -> Tensor {
    assert_eq!(a.rows, b.rows, "matmul_tn outer dimensions differ");
    let (n, k, m) = (a.rows, a.cols, b.cols);
    let mut out = Tensor::zeros(k, m);
    if m == 0 {
        return out;
    }
    // each output row p accumulates over i in ascending order
    let row = |p: usize, dst: &mut [f64]| {
        for i in 0..n {
            let av = a.data[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b.data[i * m..(i + 1) * m];
            for (d, &bv) in dst.iter_mut().zip(br) {
                *d += av * bv;
            }
        }
    };
    if n * k * m >= PAR_WORK {
        out.data.par_chunks_mut(m).enumerate().for_each(|(p, dst)| row(p, dst));
    } else {
        out.data.chunks_mut(m).enumerate().for_each(|(p, dst)| row(p, dst));
    }
    out
}

/// Rotation matrix of a (unit) quaternion `(w, x, y, z)`.
pub fn rotation_from_quat(q: &[f64]) -> [[f64; 3]; 3] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Pulls `dL/dR` back to the quaternion components of [`rotation_from_quat`].
pub(crate) fn rotation_grad(q: &[f64], g: &[[f64; 3]; 3]) -> [f64; 4] {
    let (w, x, y, z) = (q[0], q[1], q[2], q[3]);
    let dw = [[0.0, -2.0 * z, 2.0 * y], [2.0 * z, 0.0, -2.0 * x], [-2.0 * y, 2.0 * x, 0.0]];
    let dx = [[0.0, 2.0 * y, 2.0 * z], [2.0 * y, -4.0 * x, -2.0 * w], [2.0 * z, 2.0 * w, -4.0 * x]];
    let dy = [[-4.0 * y, 2.0 * x, 2.0 * w], [2.0 * x, 0.0, 2.0 * z], [-2.0 * w, 2.0 * z, -4.0 * y]];
    let dz = [[-4.0 * z, -2.0 * w, 2.0 * x], [2.0 * w, -4.0 * z, 2.0 * y], [2.0 * x, 2.0 * y, 0.0]];
    let dot = |d: &[[f64; 3]; 3]| -> f64 {
        let mut s = 0.0;
        for r in 0..3 {
            for c in 0..3 {
                s += d[r][c] * g[r][c];
            }
        }
        s
    };
    [dot(&dw), dot(&dx), dot(&dy), dot(&dz)]
}

fn im2col(input: &Tensor, h: usize, w: usize) -> Tensor {
    let cin = input.cols;
    let mut patches = Tensor::zeros(h * w, 9 * cin);
    for y in 0..h {
        for x in 0..w {
            let dst = patches.row_mut(y * w + x);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let src = input.row(sy as usize * w + sx as usize);
                    dst[(ky * 3 + kx) * cin..(ky * 3 + kx + 1) * cin].copy_from_slice(src);
                }
            }
        }
    }
    patches
}

fn col2im(patches: &Tensor, h: usize, w: usize, cin: usize) -> Tensor {
    let mut out = Tensor::zeros(h * w, cin);
    for y in 0..h {
        for x in 0..w {
            let src = patches.row(y * w + x);
            for ky in 0..3 {
                let sy = y as isize + ky as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for kx in 0..3 {
                    let sx = x as isize + kx as isize - 1;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    let dst = out.row_mut(sy as usize * w + sx as usize);
                    for (d, s) in dst.iter_mut().zip(&src[(ky * 3 + kx) * cin..(ky * 3 + kx + 1) * cin]) {
                        *d += s;
                    }
                }
            }
        }
    }
    out
}

impl Graph {
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = matmul(self.value(a), self.value(b));
        self.record(Op::MatMul(a, b), v)
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let v = matmul_nt(self.value(a), self.value(b));
        self.record(Op::MatMulNT(a, b), v)
    }

    /// Adds a `1 x m` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!((1, av.cols), bv.shape(), "bias shape mismatch");
        let mut v = av.clone();
        for r in 0..v.rows {
            for (d, b) in v.row_mut(r).iter_mut().zip(&bv.data) {
                *d += b;
            }
        }
        self.record(Op::AddBias(a, bias), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x + y);
        self.record(Op::Add(a, b), v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x - y);
        self.record(Op::Sub(a, b), v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = zip(self.value(a), self.value(b), |x, y| x * y);
        self.record(Op::Mul(a, b), v)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = map(self.value(a), |x| x * s);
        self.record(Op::Scale(a, s), v)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::tanh);
        self.record(Op::Tanh(a), v)
    }

    /// Frequency encoding of every entry: row width `k` becomes `2 * k * bands`,
    /// ordered per input column as `sin(2^0 pi x), cos(2^0 pi x), sin(2^1 pi x), ...`.
    pub fn gamma(&mut self, a: Var, bands: usize) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(t.rows, 2 * bands * t.cols);
        for r in 0..t.rows {
            let dst = out.row_mut(r);
            for (c, &x) in t.row(r).iter().enumerate() {
                gamma_into(x, bands, &mut dst[2 * bands * c..2 * bands * (c + 1)]);
            }
        }
        self.record(Op::Gamma(a, bands), out)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = map(self.value(a), sigmoid);
        self.record(Op::Sigmoid(a), v)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = map(self.value(a), f64::abs);
        self.record(Op::Abs(a), v)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = map(self.value(a), |x| x * x);
        self.record(Op::Square(a), v)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).data.iter().sum());
        self.record(Op::Sum(a), v)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let v = Tensor::scalar(t.data.iter().sum::<f64>() / t.len() as f64);
        self.record(Op::Mean(a), v)
    }

    pub fn concat_cols(&mut self, vs: &[Var]) -> Var {
        let rows = self.value(vs[0]).rows;
        let cols: usize = vs.iter().map(|v| self.value(*v).cols).sum();
        let mut out = Tensor::zeros(rows, cols);
        let mut off = 0;
        for v in vs {
            let t = self.value(*v);
            assert_eq!(t.rows, rows, "concat_cols row mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        self.record(Op::ConcatCols(vs.to_vec()), out)
    }

    pub fn concat_rows(&mut self, vs: &[Var]) -> Var {
        let cols = self.value(vs[0]).cols;
        let mut data = Vec::new();
        let mut rows = 0;
        for v in vs {
            let t = self.value(*v);
            assert_eq!(t.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&t.data);
            rows += t.rows;
        }
        self.record(Op::ConcatRows(vs.to_vec()), Tensor::from_vec(rows, cols, data))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let t = self.value(a);
        assert!(start + len <= t.cols, "slice past the last column");
        let mut out = Tensor::zeros(t.rows, len);
        for r in 0..t.rows {
            out.row_mut(r).copy_from_slice(&t.row(r)[start..start + len]);
        }
        self.record(Op::SliceCols(a, start), out)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<u32>>) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(idx.len(), t.cols);
        for (i, &r) in idx.iter().enumerate() {
            out.row_mut(i).copy_from_slice(t.row(r as usize));
        }
        self.record(Op::GatherRows(a, idx), out)
    }

    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        let t = self.value(a);
        assert_eq!(t.rows, 1, "broadcast needs a single row");
        let mut data = Vec::with_capacity(n * t.cols);
        for _ in 0..n {
            data.extend_from_slice(&t.data);
        }
        let v = Tensor::from_vec(n, t.cols, data);
        self.record(Op::BroadcastRows(a), v)
    }

    /// Row `i` of the output is the mean of rows `nbrs.row(i)` of `a`.
    pub fn neighbor_mean(&mut self, a: Var, nbrs: Arc<Csr>) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(nbrs.len(), t.cols);
        for i in 0..nbrs.len() {
            let ids = nbrs.row(i);
            let s = 1.0 / ids.len() as f64;
            let dst = out.row_mut(i);
            for &j in ids {
                for (d, x) in dst.iter_mut().zip(t.row(j as usize)) {
                    *d += x * s;
                }
            }
        }
        self.record(Op::NeighborMean(a, nbrs), out)
    }

    /// Bilinear samples of a texel-major map (`texels x channels`); each
    /// output row reads `cols` channels starting at the query's `col`.
    pub fn sample(&mut self, map: Var, queries: Arc<Vec<SampleQuery>>, cols: usize) -> Var {
        let t = self.value(map);
        let mut out = Tensor::zeros(queries.len(), cols);
        for (i, q) in queries.iter().enumerate() {
            let c0 = q.col as usize;
            assert!(c0 + cols <= t.cols, "sample reads past the map channels");
            let dst = out.row_mut(i);
            for k in 0..4 {
                let w = q.weights[k];
                if w == 0.0 {
                    continue;
                }
                let src = &t.row(q.texels[k] as usize)[c0..c0 + cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        self.record(Op::Sample(map, queries), out)
    }

    /// `out[dst] = a[src]` for each `(dst, src)` pair; unlisted rows are zero.
    /// Pairs must name each destination at most once.
    pub fn scatter_rows(&mut self, a: Var, pairs: Arc<Vec<(u32, u32)>>, out_rows: usize) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(out_rows, t.cols);
        for &(d, s) in pairs.iter() {
            out.row_mut(d as usize).copy_from_slice(t.row(s as usize));
        }
        self.record(Op::ScatterRows(a, pairs), out)
    }

    /// Copy of `base` with rows `rows[i]` replaced by row `i` of `values`.
    pub fn replace_rows(&mut self, base: Var, rows: Arc<Vec<u32>>, values: Var) -> Var {
        let mut out = self.value(base).clone();
        let vals = self.value(values);
        assert_eq!(vals.rows, rows.len(), "replacement row count mismatch");
        for (i, &r) in rows.iter().enumerate() {
            out.row_mut(r as usize).copy_from_slice(vals.row(i));
        }
        self.record(Op::ReplaceRows(base, rows, values), out)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                s += *x;
            }
            for x in row.iter_mut() {
                *x /= s;
            }
        }
        self.record(Op::SoftmaxRows(a), out)
    }

    /// `r * u / (1 + |u|)` per row: a smooth map into the open ball of radius `r`.
    pub fn radial_squash(&mut self, a: Var, r: f64) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in row.iter_mut() {
                *x *= r / (1.0 + n);
            }
        }
        self.record(Op::RadialSquash(a, r), out)
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for i in 0..out.rows {
            let row = out.row_mut(i);
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n > 0.0 {
                for x in row.iter_mut() {
                    *x /= n;
                }
            }
        }
        self.record(Op::NormalizeRows(a), out)
    }

    /// Offsets along a principal axis: for each `(row, axis, sign)`,
    /// `sign * 0.5 * exp(log_scale[row][axis]) * R(quat[row])[:, axis]`.
    pub fn axis_offset(&mut self, quat: Var, log_scale: Var, entries: Arc<Vec<(u32, u8, f64)>>) -> Var {
        let (q, ls) = (self.value(quat), self.value(log_scale));
        let mut out = Tensor::zeros(entries.len(), 3);
        for (e, &(r, a, s)) in entries.iter().enumerate() {
            let (r, a) = (r as usize, a as usize);
            let rot = rotation_from_quat(q.row(r));
            let len = s * 0.5 * ls.at(r, a).exp();
            for k in 0..3 {
                out.set(e, k, len * rot[k][a]);
            }
        }
        self.record(Op::AxisOffset(quat, log_scale, entries), out)
    }

    /// 3x3 same-size convolution with zero padding on an `h x w` image stored
    /// pixel-major (`h*w x cin`). `weight` is `9*cin x cout`.
    pub fn conv3x3(&mut self, input: Var, weight: Var, h: usize, w: usize) -> Var {
        let (x, k) = (self.value(input), self.value(weight));
        assert_eq!(x.rows, h * w, "conv input is not h*w pixels");
        assert_eq!(k.rows, 9 * x.cols, "conv weight rows must be 9*cin");
        let v = matmul(&im2col(x, h, w), k);
        self.record(Op::Conv3x3(input, weight, h, w), v)
    }

    /// 2x2 average pooling (odd trailing rows/columns are dropped).
    pub fn avg_pool2(&mut self, input: Var, h: usize, w: usize) -> Var {
        let x = self.value(input);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Tensor::zeros(oh * ow, x.cols);
        for y in 0..oh {
            for xx in 0..ow {
                let dst = out.row_mut(y * ow + xx);
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    for (d, s) in dst.iter_mut().zip(x.row((2 * y + dy) * w + 2 * xx + dx)) {
                        *d += 0.25 * s;
                    }
                }
            }
        }
        self.record(Op::AvgPool2(input, h, w), out)
    }
}

pub(crate) fn gamma_into(x: f64, bands: usize, dst: &mut [f64]) {
    let mut f = std::f64::consts::PI;
    for l in 0..bands {
        let (s, c) = (f * x).sin_cos();
        dst[2 * l] = s;
        dst[2 * l + 1] = c;
        f *= 2.0;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Pushes `g` (the gradient of node `i`) to the node's inputs.
pub(crate) fn backward(graph: &Graph, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let node = &graph.nodes[i];
    let val = |v: Var| &graph.nodes[v.0].value;
    let wants = |v: Var| graph.nodes[v.0].needs_grad;
    let send = |v: Var, t: Tensor, grads: &mut [Option<Tensor>]| {
        if graph.nodes[v.0].needs_grad {
            accumulate(&mut grads[v.0], t);
        }
    };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            if wants(*a) {
                send(*a, matmul_nt(g, val(*b)), grads);
            }
            if wants(*b) {
                send(*b, matmul_tn(val(*a), g), grads);
            }
        }
        Op::MatMulNT(a, b) => {
            if wants(*a) {
                send(*a, matmul(g, val(*b)), grads);
            }
            if wants(*b) {
                send(*b, matmul_tn(g, val(*a)), grads);
            }
        }
        Op::AddBias(a, b) => {
            if wants(*b) {
                let mut db = Tensor::zeros(1, g.cols);
                for r in 0..g.rows {
                    for (d, x) in db.data.iter_mut().zip(g.row(r)) {
                        *d += x;
                    }
                }
                send(*b, db, grads);
            }
            send(*a, g.clone(), grads);
        }
        Op::Add(a, b) => {
            send(*a, g.clone(), grads);
            send(*b, g.clone(), grads);
        }
        Op::Sub(a, b) => {
            send(*a, g.clone(), grads);
            send(*b, map(g, |x| -x), grads);
        }
        Op::Mul(a, b) => {
            if wants(*a) {
                send(*a, zip(g, val(*b), |x, y| x * y), grads);
            }
            if wants(*b) {
                send(*b, zip(g, val(*a), |x, y| x * y), grads);
            }
        }
        Op::Scale(a, s) => send(*a, map(g, |x| x * s), grads),
        Op::Tanh(a) => send(*a, zip(g, &node.value, |x, y| x * (1.0 - y * y)), grads),
        Op::Gamma(a, bands) => {
            let x = val(*a);
            let mut t = Tensor::zeros(x.rows, x.cols);
            for r in 0..x.rows {
                let gr = g.row(r);
                for c in 0..x.cols {
                    let y = &node.value.row(r)[2 * bands * c..];
                    let gg = &gr[2 * bands * c..];
                    let mut f = std::f64::consts::PI;
                    let mut acc = 0.0;
                    for l in 0..*bands {
                        // d sin = f cos, d cos = -f sin
                        acc += f * (gg[2 * l] * y[2 * l + 1] - gg[2 * l + 1] * y[2 * l]);
                        f *= 2.0;
                    }
                    t.data[r * x.cols + c] = acc;
                }
            }
            send(*a, t, grads);
        }
        Op::Sigmoid(a) => send(*a, zip(g, &node.value, |x, y| x * y * (1.0 - y)), grads),
        Op::Abs(a) => {
            send(*a, zip(g, val(*a), |x, y| if y > 0.0 { x } else if y < 0.0 { -x } else { 0.0 }), grads)
        }
        Op::Square(a) => send(*a, zip(g, val(*a), |x, y| 2.0 * x * y), grads),
        Op::Sum(a) => {
            let (r, c) = val(*a).shape();
            send(*a, Tensor::filled(r, c, g.item()), grads);
        }
        Op::Mean(a) => {
            let (r, c) = val(*a).shape();
            send(*a, Tensor::filled(r, c, g.item() / (r * c) as f64), grads);
        }
        Op::ConcatCols(vs) => {
            let mut off = 0;
            for v in vs {
                let cols = val(*v).cols;
                if wants(*v) {
                    let mut t = Tensor::zeros(g.rows, cols);
                    for r in 0..g.rows {
                        t.row_mut(r).copy_from_slice(&g.row(r)[off..off + cols]);
                    }
                    send(*v, t, grads);
                }
                off += cols;
            }
        }
        Op::ConcatRows(vs) => {
            let mut off = 0;
            for v in vs {
                let rows = val(*v).rows;
                if wants(*v) {
                    let t = Tensor::from_vec(rows, g.cols, g.data[off * g.cols..(off + rows) * g.cols].to_vec());
                    send(*v, t, grads);
                }
                off += rows;
            }
        }
        Op::SliceCols(a, start) => {
            let src = val(*a);
            let mut t = Tensor::zeros(src.rows, src.cols);
            for r in 0..g.rows {
                t.row_mut(r)[*start..*start + g.cols].copy_from_slice(g.row(r));
            }
            send(*a, t, grads);
        }
        Op::GatherRows(a, idx) => {
            let src = val(*a);
            let mut t = Tensor::zeros(src.rows, src.cols);
            for (i, &r) in idx.iter().enumerate() {
                for (d, x) in t.row_mut(r as usize).iter_mut().zip(g.row(i)) {
                    *d += x;
                }
            }
            send(*a, t, grads);
        }
        Op::BroadcastRows(a) => {
            let mut t = Tensor::zeros(1, g.cols);
            for r in 0..g.rows {
                for (d, x) in t.data.iter_mut().zip(g.row(r)) {
                    *d += x;
                }
            }
            send(*a, t, grads);
        }
        Op::NeighborMean(a, nbrs) => {
            let src = val(*a);
            let mut t = Tensor::zeros(src.rows, src.cols);
            for i in 0..nbrs.len() {
                let ids = nbrs.row(i);
                let s = 1.0 / ids.len() as f64;
                for &j in ids {
                    for (d, x) in t.row_mut(j as usize).iter_mut().zip(g.row(i)) {
                        *d += x * s;
                    }
                }
            }
            send(*a, t, grads);
        }
        Op::Sample(m, queries) => {
            let src = val(*m);
            let mut t = Tensor::zeros(src.rows, src.cols);
            for (i, q) in queries.iter().enumerate() {
                let c0 = q.col as usize;
                for k in 0..4 {
                    let w = q.weights[k];
                    if w == 0.0 {
                        continue;
                    }
                    let dst = &mut t.row_mut(q.texels[k] as usize)[c0..c0 + g.cols];
                    for (d, x) in dst.iter_mut().zip(g.row(i)) {
                        *d += w * x;
                    }
                }
            }
            send(*m, t, grads);
        }
        Op::ScatterRows(a, pairs) => {
            let src = val(*a);
            let mut t = Tensor::zeros(src.rows, src.cols);
            for &(d, s) in pairs.iter() {
                t.row_mut(s as usize).copy_from_slice(g.row(d as usize));
            }
            send(*a, t, grads);
        }
        Op::ReplaceRows(base, rows, values) => {
            if wants(*values) {
                let mut t = Tensor::zeros(rows.len(), g.cols);
                for (i, &r) in rows.iter().enumerate() {
                    t.row_mut(i).copy_from_slice(g.row(r as usize));
                }
                send(*values, t, grads);
            }
            if wants(*base) {
                let mut t = g.clone();
                for &r in rows.iter() {
                    t.row_mut(r as usize).iter_mut().for_each(|x| *x = 0.0);
                }
                send(*base, t, grads);
            }
        }
        Op::SoftmaxRows(a) => {
            let y = &node.value;
            let mut t = Tensor::zeros(y.rows, y.cols);
            for r in 0..y.rows {
                let dot: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                for ((d, gy), yy) in t.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                    *d = yy * (gy - dot);
                }
            }
            send(*a, t, grads);
        }
        Op::RadialSquash(a, radius) => {
            let u = val(*a);
            let mut t = Tensor::zeros(u.rows, u.cols);
            for r in 0..u.rows {
                let ur = u.row(r);
                let gr = g.row(r);
                let n = ur.iter().map(|x| x * x).sum::<f64>().sqrt();
                let dst = t.row_mut(r);
                if n == 0.0 {
                    for (d, x) in dst.iter_mut().zip(gr) {
                        *d = radius * x;
                    }
                    continue;
                }
                let ug: f64 = ur.iter().zip(gr).map(|(a, b)| a * b).sum();
                let c = ug / (n * (1.0 + n) * (1.0 + n));
                for ((d, x), uu) in dst.iter_mut().zip(gr).zip(ur) {
                    *d = radius * (x / (1.0 + n) - uu * c);
                }
            }
            send(*a, t, grads);
        }
        Op::NormalizeRows(a) => {
            let u = val(*a);
            let y = &node.value;
            let mut t = Tensor::zeros(u.rows, u.cols);
            for r in 0..u.rows {
                let n = u.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                if n == 0.0 {
                    continue;
                }
                let yg: f64 = y.row(r).iter().zip(g.row(r)).map(|(a, b)| a * b).sum();
                for ((d, x), yy) in t.row_mut(r).iter_mut().zip(g.row(r)).zip(y.row(r)) {
                    *d = (x - yy * yg) / n;
                }
            }
            send(*a, t, grads);
        }
        Op::AxisOffset(quat, log_scale, entries) => {
            let (q, ls) = (val(*quat), val(*log_scale));
            let mut dq = Tensor::zeros(q.rows, q.cols);
            let mut dls = Tensor::zeros(ls.rows, ls.cols);
            for (e, &(r, a, s)) in entries.iter().enumerate() {
                let (r, a) = (r as usize, a as usize);
                let rot = rotation_from_quat(q.row(r));
                let len = s * 0.5 * ls.at(r, a).exp();
                let ge = g.row(e);
                // d/dlog_scale: out itself
                let proj: f64 = (0..3).map(|k| ge[k] * rot[k][a]).sum();
                dls.data[r * 3 + a] += len * proj;
                let mut dr = [[0.0; 3]; 3];
                for k in 0..3 {
                    dr[k][a] = len * ge[k];
                }
                let gq = rotation_grad(q.row(r), &dr);
                for k in 0..4 {
                    dq.data[r * 4 + k] += gq[k];
                }
            }
            send(*quat, dq, grads);
            send(*log_scale, dls, grads);
        }
        Op::Conv3x3(input, weight, h, w) => {
            let x = val(*input);
            let k = val(*weight);
            let patches = im2col(x, *h, *w);
            if wants(*weight) {
                send(*weight, matmul_tn(&patches, g), grads);
            }
            if wants(*input) {
                let dp = matmul_nt(g, k);
                send(*input, col2im(&dp, *h, *w, x.cols), grads);
            }
        }
        Op::AvgPool2(input, h, w) => {
            let x = val(*input);
            let (oh, ow) = (h / 2, w / 2);
            let mut t = Tensor::zeros(x.rows, x.cols);
            for y in 0..oh {
                for xx in 0..ow {
                    let src = g.row(y * ow + xx).to_vec();
                    for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                        for (d, s) in t.row_mut((2 * y + dy) * w + 2 * xx + dx).iter_mut().zip(&src) {
                            *d += 0.25 * s;
                        }
                    }
                }
            }
            send(*input, t, grads);
        }
    }
}
