//! Minimal reverse-mode differentiation over dense matrices.
//!
//! A [`Graph`] is an append-only tape: every operation pushes a node whose
//! inputs are earlier nodes, so node order is a topological order and the
//! backward sweep simply walks the tape in reverse.

mod ops;
mod tensor;

use std::sync::Arc;

pub use ops::{rotation_from_quat, SampleQuery};
pub(crate) use ops::{gamma_into, rotation_grad};
pub use tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Gamma(Var, usize),
    Sigmoid(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Arc<Vec<u32>>),
    BroadcastRows(Var),
    NeighborMean(Var, Arc<Csr>),
    Sample(Var, Arc<Vec<SampleQuery>>),
    ScatterRows(Var, Arc<Vec<(u32, u32)>>),
    ReplaceRows(Var, Arc<Vec<u32>>, Var),
    SoftmaxRows(Var),
    RadialSquash(Var, f64),
    NormalizeRows(Var),
    AxisOffset(Var, Var, Arc<Vec<(u32, u8, f64)>>),
    Conv3x3(Var, Var, usize, usize),
    AvgPool2(Var, usize, usize),
}

/// Compressed neighbour lists: neighbours of row `i` are `ids[offsets[i]..offsets[i + 1]]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub offsets: Vec<u32>,
    pub ids: Vec<u32>,
}

impl Csr {
    pub fn from_lists(lists: &[Vec<u32>]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut ids = Vec::new();
        offsets.push(0);
        for l in lists {
            ids.extend_from_slice(l);
            offsets.push(ids.len() as u32);
        }
        Csr { offsets, ids }
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.ids[self.offsets[i] as usize..self.offsets[i + 1] as usize]
    }
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Debug, Default, Clone)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`]; nodes the sweep never reached read as zero.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        self.grads[v.0].take().unwrap_or_else(|| Tensor::zeros(r, c))
    }

    pub fn grad(&self, v: Var) -> Tensor {
        let (r, c) = self.shapes[v.0];
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(r, c))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// An input that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t, requires_grad)
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node { op, value, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub(crate) fn record(&mut self, op: Op, value: Tensor) -> Var {
        let needs = self.any_grad(&ops::inputs(&op));
        self.push(op, value, needs)
    }

    /// Reverse sweep from one or more seeded nodes.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut top = 0;
        for (v, g) in seeds {
            assert_eq!(g.shape(), self.nodes[v.0].value.shape(), "seed shape mismatch");
            accumulate(&mut grads[v.0], g.clone());
            top = top.max(v.0 + 1);
        }
        for i in (0..top).rev() {
            if !self.nodes[i].needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            ops::backward(self, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Gradients { grads, shapes }
    }

    /// Backward from a scalar node with seed 1.
    pub fn backward_scalar(&self, loss: Var) -> Gradients {
        self.backward(&[(loss, Tensor::scalar(1.0))])
    }
}

pub(crate) fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}
