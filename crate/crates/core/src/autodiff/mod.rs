//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation as a node holding its output value.
//! Nodes are appended in execution order, so the tape is always
//! topologically sorted and [`Tape::backward`] is a single reverse sweep.
//!
//! Parameters enter the tape through [`Tape::param`], which copies the
//! current value out of a [`ParamStore`] and remembers where it came from;
//! [`Tape::accumulate_param_grads`] adds the leaf gradients back into the
//! store after a backward pass.

mod fused;
mod ops;

pub use fused::{AttentionSpec, CellLink};
pub(crate) use fused::gather_predecessors;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Pointwise operations exposed through [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Mul,
    Sigmoid,
    Tanh,
    Exp,
    Log,
}

pub(crate) enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    SoftmaxRows(Var),
    MaxPool { x: Var, argmax: Vec<usize> },
    Concat(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    Sum(Var),
    SumSquares(Var),
    GatherRows { table: Var, idx: Vec<usize> },
    LayerNorm(Box<fused::LayerNormSaved<T>>),
    Attention(Box<fused::AttentionSaved<T>>),
    CrossEntropy(Box<fused::CrossEntropySaved<T>>),
    GridDiag(Box<fused::GridDiagSaved<T>>),
    GridPool(Box<fused::GridPoolSaved>),
}

pub(crate) struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Recording of one forward computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input tensor; gradients are kept for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Copies a parameter onto the tape as a differentiable leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a node after [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub(crate) fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Back-propagates from a scalar `loss`, adding the result to the
    /// gradients of earlier calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", &shape, &[]));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(&shape, T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        if self.grads.len() < grads.len() {
            self.grads.resize_with(grads.len(), || None);
        }
        for (slot, g) in self.grads.iter_mut().zip(grads) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => acc.add_assign(&g)?,
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
        Ok(())
    }

    /// Adds every parameter leaf's gradient into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                store.grad_mut(id).add_assign(g)?;
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let needs = |v: &Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if needs(a) {
                    let da = slot(grads, *a, av.shape());
                    T::gemm(m, n, k, T::one(), g.data(), (n as isize, 1), bv.data(), (1, n as isize), T::one(), da, (k as isize, 1));
                }
                if needs(b) {
                    let db = slot(grads, *b, bv.shape());
                    T::gemm(k, m, n, T::one(), av.data(), (1, k as isize), g.data(), (n as isize, 1), T::one(), db, (n as isize, 1));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if needs(v) {
                        add_into(slot(grads, *v, out.shape()), g.data());
                    }
                }
            }
            Op::Sub(a, b) => {
                if needs(a) {
                    add_into(slot(grads, *a, out.shape()), g.data());
                }
                if needs(b) {
                    let db = slot(grads, *b, out.shape());
                    for (d, &x) in db.iter_mut().zip(g.data()) {
                        *d = *d - x;
                    }
                }
            }
            Op::AddRow(a, b) => {
                if needs(a) {
                    add_into(slot(grads, *a, out.shape()), g.data());
                }
                if needs(b) {
                    let cols = out.cols();
                    let db = slot(grads, *b, self.shape(*b));
                    for r in 0..out.rows() {
                        add_into(db, &g.data()[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if needs(a) {
                    let da = slot(grads, *a, out.shape());
                    for ((d, &gx), &y) in da.iter_mut().zip(g.data()).zip(bv) {
                        *d = *d + gx * y;
                    }
                }
                if needs(b) {
                    let db = slot(grads, *b, out.shape());
                    for ((d, &gx), &x) in db.iter_mut().zip(g.data()).zip(av) {
                        *d = *d + gx * x;
                    }
                }
            }
            Op::MulRow(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let cols = out.cols();
                if needs(a) {
                    let da = slot(grads, *a, out.shape());
                    for (i, (d, &gx)) in da.iter_mut().zip(g.data()).enumerate() {
                        *d = *d + gx * bv.data()[i % cols];
                    }
                }
                if needs(b) {
                    let db = slot(grads, *b, bv.shape());
                    for (i, (&gx, &x)) in g.data().iter().zip(av.data()).enumerate() {
                        db[i % cols] = db[i % cols] + gx * x;
                    }
                }
            }
            Op::MulConst(a, c) => {
                if needs(a) {
                    let da = slot(grads, *a, out.shape());
                    for ((d, &gx), &m) in da.iter_mut().zip(g.data()).zip(c.data()) {
                        *d = *d + gx * m;
                    }
                }
            }
            Op::Scale(a, s) => {
                if needs(a) {
                    let da = slot(grads, *a, out.shape());
                    for (d, &gx) in da.iter_mut().zip(g.data()) {
                        *d = *d + gx * *s;
                    }
                }
            }
            Op::Sigmoid(a) => unary_back(grads, *a, g, out, |_, y| y * (T::one() - y), &needs),
            Op::Tanh(a) => unary_back(grads, *a, g, out, |_, y| T::one() - y * y, &needs),
            Op::Exp(a) => unary_back(grads, *a, g, out, |_, y| y, &needs),
            Op::Log(a) => {
                let xv = self.value(*a);
                if needs(a) {
                    let da = slot(grads, *a, out.shape());
                    for ((d, &gx), &x) in da.iter_mut().zip(g.data()).zip(xv.data()) {
                        *d = *d + gx / x;
                    }
                }
            }
            Op::Relu(a) => unary_back(
                grads,
                *a,
                g,
                out,
                |_, y| if y > T::zero() { T::one() } else { T::zero() },
                &needs,
            ),
            Op::SoftmaxRows(a) => {
                if needs(a) {
                    let cols = out.cols();
                    let da = slot(grads, *a, out.shape());
                    for r in 0..out.rows() {
                        let y = out.row(r);
                        let gy = &g.data()[r * cols..(r + 1) * cols];
                        let dot = y.iter().zip(gy).fold(T::zero(), |s, (&a, &b)| s + a * b);
                        for c in 0..cols {
                            da[r * cols + c] = da[r * cols + c] + y[c] * (gy[c] - dot);
                        }
                    }
                }
            }
            Op::MaxPool { x, argmax, .. } => {
                if needs(x) {
                    let dx = slot(grads, *x, self.shape(*x));
                    for (&pos, &gx) in argmax.iter().zip(g.data()) {
                        dx[pos] = dx[pos] + gx;
                    }
                }
            }
            Op::Concat(parts) => {
                let total = out.cols();
                let mut off = 0;
                for p in parts {
                    let w = self.value(*p).cols();
                    if needs(p) {
                        let shape = self.shape(*p).to_vec();
                        let dp = slot(grads, *p, &shape);
                        for r in 0..out.rows() {
                            add_into(&mut dp[r * w..(r + 1) * w], &g.data()[r * total + off..r * total + off + w]);
                        }
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    if needs(p) {
                        let shape = self.shape(*p).to_vec();
                        add_into(slot(grads, *p, &shape), &g.data()[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::SliceRows { x, start } => {
                if needs(x) {
                    let cols = out.cols();
                    let dx = slot(grads, *x, self.shape(*x));
                    add_into(&mut dx[start * cols..start * cols + out.len()], g.data());
                }
            }
            Op::SliceCols { x, start } => {
                if needs(x) {
                    let w = out.cols();
                    let full = self.value(*x).cols();
                    let dx = slot(grads, *x, self.shape(*x));
                    for r in 0..out.rows() {
                        add_into(
                            &mut dx[r * full + start..r * full + start + w],
                            &g.data()[r * w..(r + 1) * w],
                        );
                    }
                }
            }
            Op::Sum(a) => {
                if needs(a) {
                    let gs = g.data()[0];
                    let da = slot(grads, *a, self.shape(*a));
                    for d in da.iter_mut() {
                        *d = *d + gs;
                    }
                }
            }
            Op::SumSquares(a) => {
                if needs(a) {
                    let gs = g.data()[0];
                    let two = T::lit(2.0);
                    let xv = self.value(*a).data();
                    let da = slot(grads, *a, self.shape(*a));
                    for (d, &x) in da.iter_mut().zip(xv) {
                        *d = *d + two * x * gs;
                    }
                }
            }
            Op::GatherRows { table, idx } => {
                if needs(table) {
                    let cols = out.cols();
                    let dt = slot(grads, *table, self.shape(*table));
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut dt[i * cols..(i + 1) * cols], &g.data()[r * cols..(r + 1) * cols]);
                    }
                }
            }
            Op::LayerNorm(s) => fused::layer_norm_backward(self, s, g, grads),
            Op::Attention(s) => fused::attention_backward(self, s, g, grads),
            Op::CrossEntropy(s) => fused::cross_entropy_backward(self, s, g, grads),
            Op::GridDiag(s) => fused::grid_diag_backward(self, s, g, grads),
            Op::GridPool(s) => fused::grid_pool_backward(self, s, g, grads),
        }
        Ok(())
    }
}

/// Mutable gradient buffer for `v`, created as zeros on first use.
pub(crate) fn slot<'a, T: Scalar>(grads: &'a mut [Option<Tensor<T>>], v: Var, shape: &[usize]) -> &'a mut [T] {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(shape)).data_mut()
}

pub(crate) fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn unary_back<T: Scalar>(
    grads: &mut [Option<Tensor<T>>],
    a: Var,
    g: &Tensor<T>,
    out: &Tensor<T>,
    local: impl Fn(T, T) -> T,
    needs: &dyn Fn(&Var) -> bool,
) {
    if !needs(&a) {
        return;
    }
    let da = slot(grads, a, out.shape());
    for ((d, &gx), &y) in da.iter_mut().zip(g.data()).zip(out.data()) {
        *d = *d + gx * local(gx, y);
    }
}
