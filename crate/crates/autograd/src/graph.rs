//! Recording graph and the reverse sweep.
//!
//! Nodes are appended in evaluation order, so node ids are already a
//! topological order. Backward rules are written with the same [`Var`]
//! operations as the forward pass; the adjoint computation is therefore itself
//! recorded and can be differentiated again (`create_graph = true`).

use std::cell::RefCell;
use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::sparse::SparseMap;
use crate::tensor::Tensor;

#[derive(Clone)]
pub(crate) enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Sparse(usize, Arc<SparseMap>),
    Reshape(usize),
    Relu(usize),
    Abs(usize),
    SignedSqrt(usize),
    /// `0.5 / |y|` of a signed-sqrt output `y` (0 where `y == 0`).
    SqrtSlope(usize),
    Sum(usize),
    Fill(usize),
    LogSumExp(usize),
    Softmax(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    /// True when the node depends on a differentiable leaf.
    tracked: bool,
}

/// One differentiation context. Not shareable across threads; run
/// independent computations on independent graphs.
#[derive(Default)]
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    pub(crate) graph: &'g Graph,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.id, self.value())
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of recorded nodes.
    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Inserts a tensor, tracked iff `tensor.requires_grad()`.
    pub fn input(&self, tensor: Tensor) -> Var<'_> {
        let tracked = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    /// Inserts a differentiable leaf.
    pub fn leaf(&self, tensor: Tensor) -> Var<'_> {
        self.input(tensor.with_requires_grad(true))
    }

    /// Inserts a non-differentiable constant.
    pub fn constant(&self, tensor: Tensor) -> Var<'_> {
        self.input(tensor.with_requires_grad(false))
    }

    pub(crate) fn push(&self, value: Tensor, op: Op, tracked: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op, tracked });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    pub(crate) fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].tracked
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { graph: self, id }
    }

    fn owns(&self, v: &Var<'_>) -> bool {
        std::ptr::eq(self, v.graph) && v.id < self.len()
    }

    /// Gradients of the scalar `output` with respect to each of `leaves`.
    ///
    /// Leaves that `output` does not depend on receive zeros. With
    /// `create_graph` the returned vars remain connected to the graph and can
    /// be differentiated again; otherwise they are detached constants.
    pub fn grad<'g>(&'g self, output: Var<'g>, leaves: &[Var<'g>], create_graph: bool) -> Result<Vec<Var<'g>>> {
        if !self.owns(&output) {
            return Err(TensorError::invalid("grad", "output belongs to another graph"));
        }
        let out_value = output.value();
        if out_value.len() != 1 {
            return Err(TensorError::NonScalar(out_value.shape().to_vec()));
        }
        for leaf in leaves {
            if !self.owns(leaf) {
                return Err(TensorError::LeafNotInGraph);
            }
            let nodes = self.nodes.borrow();
            let node = &nodes[leaf.id];
            if !matches!(node.op, Op::Leaf) || !node.tracked {
                return Err(TensorError::LeafNotInGraph);
            }
        }

        let n = output.id + 1;
        // Nodes lying downstream of a requested leaf.
        let mut relevant = vec![false; n];
        for leaf in leaves {
            if leaf.id < n {
                relevant[leaf.id] = true;
            }
        }
        {
            let nodes = self.nodes.borrow();
            for id in 0..n {
                if relevant[id] {
                    continue;
                }
                relevant[id] = inputs_of(&nodes[id].op).iter().any(|&i| relevant[i]);
            }
        }

        let mut grads: Vec<Option<Var<'g>>> = vec![None; n];
        if relevant[output.id] {
            let seed = Tensor::full(out_value.shape(), 1.0)?;
            grads[output.id] = Some(self.constant(seed));
        }
        for id in (0..n).rev() {
            if !relevant[id] {
                continue;
            }
            let Some(g) = grads[id] else { continue };
            let op = self.nodes.borrow()[id].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            for (input, contribution) in self.backward(id, &op, g)? {
                if !relevant[input] {
                    continue;
                }
                grads[input] = Some(match grads[input] {
                    Some(acc) => acc.add(contribution)?,
                    None => contribution,
                });
            }
        }

        leaves
            .iter()
            .map(|leaf| {
                let g = match grads.get(leaf.id).copied().flatten() {
                    Some(g) => g,
                    None => self.constant(Tensor::zeros(leaf.value().shape())),
                };
                Ok(if create_graph { g } else { self.constant(g.value()) })
            })
            .collect()
    }

    /// Like [`Graph::grad`] but returns plain tensors.
    pub fn grad_values<'g>(&'g self, output: Var<'g>, leaves: &[Var<'g>]) -> Result<Vec<Tensor>> {
        Ok(self
            .grad(output, leaves, false)?
            .into_iter()
            .map(|v| v.value())
            .collect())
    }

    fn backward<'g>(&'g self, id: usize, op: &Op, g: Var<'g>) -> Result<Vec<(usize, Var<'g>)>> {
        let this = self.var(id);
        Ok(match *op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(a, g), (b, g)],
            Op::Sub(a, b) => vec![(a, g), (b, g.scale(-1.0)?)],
            Op::Mul(a, b) => vec![(a, g.mul(self.var(b))?), (b, g.mul(self.var(a))?)],
            Op::Scale(a, s) => vec![(a, g.scale(s)?)],
            Op::Offset(a) => vec![(a, g)],
            Op::MatMul { a, b, ta, tb } => {
                let (va, vb) = (self.var(a), self.var(b));
                let ga = if ta { vb.matmul_t(g, tb, true)? } else { g.matmul_t(vb, false, !tb)? };
                let gb = if tb { g.matmul_t(va, true, ta)? } else { va.matmul_t(g, !ta, false)? };
                vec![(a, ga), (b, gb)]
            }
            Op::Sparse(x, ref map) => vec![(x, g.sparse(map.transposed())?)],
            Op::Reshape(x) => {
                let shape = self.value_of(x).shape().to_vec();
                vec![(x, g.reshape(&shape)?)]
            }
            Op::Relu(x) => {
                let mask = self.value_of(x).map(|v| if v > 0.0 { 1.0 } else { 0.0 })?;
                vec![(x, g.mul(self.constant(mask))?)]
            }
            Op::Abs(x) => {
                let sign = self.value_of(x).map(sign0)?;
                vec![(x, g.mul(self.constant(sign))?)]
            }
            Op::SignedSqrt(x) => vec![(x, g.mul(this.sqrt_slope()?)?)],
            Op::SqrtSlope(y) => {
                let factor = self.value_of(y).map(|v| -2.0 * sign0(v))?;
                let d = this.mul(this)?.mul(self.constant(factor))?;
                vec![(y, g.mul(d)?)]
            }
            Op::Sum(x) => {
                let shape = self.value_of(x).shape().to_vec();
                vec![(x, g.fill(&shape)?)]
            }
            Op::Fill(x) => vec![(x, g.sum()?)],
            Op::LogSumExp(x) => {
                let (rows, cols) = rows_cols(self.value_of(x).shape());
                let soft = self.var(x).softmax()?;
                let spread = g.reshape(&[rows])?.sparse(crate::sparse::row_expand(rows, cols))?;
                let spread = spread.reshape(self.value_of(x).shape())?;
                vec![(x, spread.mul(soft)?)]
            }
            Op::Softmax(x) => {
                let shape = self.value_of(x).shape().to_vec();
                let (rows, cols) = rows_cols(&shape);
                let gs = g.mul(this)?.reshape(&[rows, cols])?;
                let dot = gs.sparse(crate::sparse::row_sum(rows, cols))?;
                let dot = dot.sparse(crate::sparse::row_expand(rows, cols))?.reshape(&shape)?;
                vec![(x, this.mul(g.sub(dot)?)?)]
            }
        })
    }
}

pub(crate) fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Views a shape as `[rows, last]` for row-wise reductions; a scalar or 1-D
/// tensor is a single row.
pub(crate) fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape.split_last() {
        None => (1, 1),
        Some((&last, lead)) => (lead.iter().product(), last),
    }
}

fn inputs_of(op: &Op) -> Vec<usize> {
    match *op {
        Op::Leaf => vec![],
        Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul { a, b, .. } => vec![a, b],
        Op::Scale(a, _)
        | Op::Offset(a)
        | Op::Sparse(a, _)
        | Op::Reshape(a)
        | Op::Relu(a)
        | Op::Abs(a)
        | Op::SignedSqrt(a)
        | Op::SqrtSlope(a)
        | Op::Sum(a)
        | Op::Fill(a)
        | Op::LogSumExp(a)
        | Op::Softmax(a) => vec![a],
    }
}
