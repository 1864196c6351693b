//! Tape-based reverse-mode automatic differentiation over small dense tensors.
//!
//! Operations are recorded on a [`Tape`] as they execute. Calling
//! [`Tape::backward`] on a scalar [`Var`] walks the tape in reverse and returns
//! the gradient of that scalar with respect to every recorded node.
//!
//! ```
//! use qsf_core::autodiff::{Tape, Tensor};
//!
//! let tape = Tape::new();
//! let x = tape.var(Tensor::scalar(3.0));
//! let y = x.mul(x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(y.value().item(), Some(9.0));
//! assert_eq!(grads.wrt(x).item(), Some(6.0));
//! ```
//!
//! Elementwise binary operations accept equal shapes or a scalar on either
//! side. There is no other broadcasting.

mod check;
mod tensor;

use std::cell::RefCell;

use thiserror::Error;

pub use check::{evaluate, finite_difference, grad, relative_error, Bindings, Scope};
pub use tensor::Tensor;

pub(crate) use tensor::{log_softmax_row, softmax_row};
use tensor::rowwise;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("shape {shape:?} does not hold {len} values")]
    DataLength { shape: Vec<usize>, len: usize },
    #[error("input `{0}` is not bound")]
    UnboundInput(String),
    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("index {index} out of range for shape {shape:?}")]
    IndexOutOfRange { index: usize, shape: Vec<usize> },
    #[error("{op} expects {expected}, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
    #[error("clip bounds reversed: lo {lo} > hi {hi}")]
    ClipBounds { lo: f64, hi: f64 },
    #[error("finite-difference step must be positive, got {0}")]
    BadStep(f64),
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Minimum(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sum(usize),
    Mean(usize),
    Max(usize, usize),
    Softmax(usize),
    LogSoftmax(usize),
    Clip(usize, f64, f64),
    Row(usize, usize),
    At(usize, usize),
    Stack(Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records every operation of one evaluation.
///
/// A tape is single-threaded. Independent tapes share nothing and may be used
/// from different threads concurrently.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records a differentiable leaf.
    pub fn var(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    /// Records a leaf that callers treat as constant. Gradients still flow to
    /// it, they are simply never read.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Stacks scalar vars into a vector.
    pub fn stack<'t>(&'t self, items: &[Var<'t>]) -> Result<Var<'t>, AutodiffError> {
        let mut data = Vec::with_capacity(items.len());
        for item in items {
            let v = item.value();
            match v.item() {
                Some(x) => data.push(x),
                None => {
                    return Err(AutodiffError::BadRank {
                        op: "stack",
                        expected: "scalars",
                        shape: v.shape().to_vec(),
                    })
                }
            }
        }
        let ids = items.iter().map(|v| v.id).collect();
        Ok(self.push(Tensor::vector(data), Op::Stack(ids)))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients, AutodiffError> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id].value;
        if !root.is_scalar() {
            return Err(AutodiffError::NonScalarLoss(root.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::scalar(1.0));

        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].clone() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone().reduce_to(nodes[*a].value.shape()));
                    accumulate(&mut grads, *b, g.clone().reduce_to(nodes[*b].value.shape()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, g.clone().reduce_to(nodes[*a].value.shape()));
                    let neg = g.map(|v| -v);
                    accumulate(&mut grads, *b, neg.reduce_to(nodes[*b].value.shape()));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = g.zip_broadcast(vb, "mul", |x, y| x * y)?;
                    let gb = g.zip_broadcast(va, "mul", |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga.reduce_to(va.shape()));
                    accumulate(&mut grads, *b, gb.reduce_to(vb.shape()));
                }
                Op::Div(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let ga = g.zip_broadcast(vb, "div", |x, y| x / y)?;
                    // d(a/b)/db = -a/b² = -out/b
                    let out_over_b = node.value.zip_broadcast(vb, "div", |o, y| -o / y)?;
                    let gb = g.zip_broadcast(&out_over_b, "div", |x, y| x * y)?;
                    accumulate(&mut grads, *a, ga.reduce_to(va.shape()));
                    accumulate(&mut grads, *b, gb.reduce_to(vb.shape()));
                }
                Op::Minimum(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let take_a = va.zip_broadcast(vb, "minimum", |x, y| if x <= y { 1.0 } else { 0.0 })?;
                    let ga = g.zip_broadcast(&take_a, "minimum", |x, m| x * m)?;
                    let gb = g.zip_broadcast(&take_a, "minimum", |x, m| x * (1.0 - m))?;
                    accumulate(&mut grads, *a, ga.reduce_to(va.shape()));
                    accumulate(&mut grads, *b, gb.reduce_to(vb.shape()));
                }
                Op::Neg(a) => accumulate(&mut grads, *a, g.map(|v| -v)),
                Op::Exp(a) => {
                    let ga = g.zip_broadcast(&node.value, "exp", |x, e| x * e)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Log(a) => {
                    let ga = g.zip_broadcast(&nodes[*a].value, "log", |x, v| x / v)?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Sum(a) => {
                    let gv = g.data()[0];
                    accumulate(&mut grads, *a, Tensor::filled(nodes[*a].value.shape(), gv));
                }
                Op::Mean(a) => {
                    let va = &nodes[*a].value;
                    let gv = g.data()[0] / va.len() as f64;
                    accumulate(&mut grads, *a, Tensor::filled(va.shape(), gv));
                }
                Op::Max(a, argmax) => {
                    let mut ga = Tensor::zeros(nodes[*a].value.shape());
                    ga.data_mut()[*argmax] = g.data()[0];
                    accumulate(&mut grads, *a, ga);
                }
                Op::Softmax(a) => {
                    let n = node.value.row_len().max(1);
                    let mut ga = Tensor::zeros(node.value.shape());
                    for ((s, gr), out) in node
                        .value
                        .data()
                        .chunks(n)
                        .zip(g.data().chunks(n))
                        .zip(ga.data_mut().chunks_mut(n))
                    {
                        let dot: f64 = s.iter().zip(gr).map(|(s, g)| s * g).sum();
                        for ((o, &si), &gi) in out.iter_mut().zip(s).zip(gr) {
                            *o = si * (gi - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::LogSoftmax(a) => {
                    let n = node.value.row_len().max(1);
                    let mut ga = Tensor::zeros(node.value.shape());
                    for ((ls, gr), out) in node
                        .value
                        .data()
                        .chunks(n)
                        .zip(g.data().chunks(n))
                        .zip(ga.data_mut().chunks_mut(n))
                    {
                        let total: f64 = gr.iter().sum();
                        for ((o, &l), &gi) in out.iter_mut().zip(ls).zip(gr) {
                            *o = gi - l.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Clip(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    let ga = g.zip_broadcast(&nodes[*a].value, "clip", |x, v| {
                        if v >= lo && v <= hi {
                            x
                        } else {
                            0.0
                        }
                    })?;
                    accumulate(&mut grads, *a, ga);
                }
                Op::Row(a, r) => {
                    let va = &nodes[*a].value;
                    let n = va.row_len();
                    let mut ga = Tensor::zeros(va.shape());
                    ga.data_mut()[r * n..(r + 1) * n].copy_from_slice(g.data());
                    accumulate(&mut grads, *a, ga);
                }
                Op::At(a, i) => {
                    let mut ga = Tensor::zeros(nodes[*a].value.shape());
                    ga.data_mut()[*i] = g.data()[0];
                    accumulate(&mut grads, *a, ga);
                }
                Op::Stack(ids) => {
                    for (&child, &gv) in ids.iter().zip(g.data()) {
                        accumulate(&mut grads, child, Tensor::scalar(gv));
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn push(&self, value: Tensor, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: usize, g: Tensor) {
    match &mut grads[id] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

/// Result of one reverse pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient with respect to `var`; zeros when `var` does not influence the loss.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        match self.grads.get(var.id).and_then(Option::as_ref) {
            Some(g) => g.clone(),
            None => Tensor::zeros(var.value().shape()),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Tensor {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    /// Value of a scalar var.
    pub fn item(&self) -> Option<f64> {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id]
                .value
                .zip_broadcast(&nodes[other.id].value, name, f)?
        };
        Ok(self.tape.push(value, op))
    }

    fn unary(self, f: impl Fn(&Tensor) -> Tensor, op: Op) -> Var<'t> {
        let value = f(&self.tape.nodes.borrow()[self.id].value);
        self.tape.push(value, op)
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    /// Elementwise minimum. At ties the gradient goes to `self`.
    pub fn minimum(self, other: Var<'t>) -> Result<Var<'t>, AutodiffError> {
        self.binary(
            other,
            "minimum",
            |a, b| if a <= b { a } else { b },
            Op::Minimum(self.id, other.id),
        )
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let c = self.tape.scalar(factor);
        self.mul(c).expect("scalar broadcast never fails")
    }

    pub fn add_scalar(self, offset: f64) -> Var<'t> {
        let c = self.tape.scalar(offset);
        self.add(c).expect("scalar broadcast never fails")
    }

    pub fn neg(self) -> Var<'t> {
        self.unary(|t| t.map(|v| -v), Op::Neg(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.unary(|t| t.map(f64::exp), Op::Exp(self.id))
    }

    /// Natural logarithm.
    pub fn ln(self) -> Var<'t> {
        self.unary(|t| t.map(f64::ln), Op::Log(self.id))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(|t| Tensor::scalar(t.sum()), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(|t| Tensor::scalar(t.sum() / t.len() as f64), Op::Mean(self.id))
    }

    /// Maximum over all elements; the subgradient goes to the first maximiser.
    pub fn max(self) -> Var<'t> {
        let (argmax, best) = {
            let nodes = self.tape.nodes.borrow();
            let data = nodes[self.id].value.data();
            let mut best = (0, data[0]);
            for (i, &v) in data.iter().enumerate().skip(1) {
                if v > best.1 {
                    best = (i, v);
                }
            }
            best
        };
        self.tape.push(Tensor::scalar(best), Op::Max(self.id, argmax))
    }

    /// Softmax along the last axis.
    pub fn softmax(self) -> Var<'t> {
        self.unary(|t| rowwise(t, softmax_row), Op::Softmax(self.id))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(self) -> Var<'t> {
        self.unary(|t| rowwise(t, log_softmax_row), Op::LogSoftmax(self.id))
    }

    /// Elementwise clip to `[lo, hi]`. The subgradient is 1 on the closed
    /// interval and 0 outside it.
    pub fn clip(self, lo: f64, hi: f64) -> Result<Var<'t>, AutodiffError> {
        if lo > hi {
            return Err(AutodiffError::ClipBounds { lo, hi });
        }
        Ok(self.unary(|t| t.map(|v| v.min(hi).max(lo)), Op::Clip(self.id, lo, hi)))
    }

    /// Row `index` of a matrix.
    pub fn row(self, index: usize) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            if t.shape().len() != 2 {
                return Err(AutodiffError::BadRank {
                    op: "row",
                    expected: "a matrix",
                    shape: t.shape().to_vec(),
                });
            }
            let (rows, cols) = (t.shape()[0], t.shape()[1]);
            if index >= rows {
                return Err(AutodiffError::IndexOutOfRange {
                    index,
                    shape: t.shape().to_vec(),
                });
            }
            Tensor::vector(t.data()[index * cols..(index + 1) * cols].to_vec())
        };
        Ok(self.tape.push(value, Op::Row(self.id, index)))
    }

    /// Element `index` of a vector.
    pub fn at(self, index: usize) -> Result<Var<'t>, AutodiffError> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let t = &nodes[self.id].value;
            if t.shape().len() != 1 {
                return Err(AutodiffError::BadRank {
                    op: "at",
                    expected: "a vector",
                    shape: t.shape().to_vec(),
                });
            }
            match t.data().get(index) {
                Some(&v) => Tensor::scalar(v),
                None => {
                    return Err(AutodiffError::IndexOutOfRange {
                        index,
                        shape: t.shape().to_vec(),
                    })
                }
            }
        };
        Ok(self.tape.push(value, Op::At(self.id, index)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_grad(f: impl for<'t> Fn(Var<'t>) -> Var<'t>, x: f64) -> (f64, f64) {
        let tape = Tape::new();
        let v = tape.var(Tensor::scalar(x));
        let y = f(v);
        let g = tape.backward(y).unwrap();
        (y.item().unwrap(), g.wrt(v).item().unwrap())
    }

    #[test]
    fn square_value_and_derivative() {
        let (v, d) = scalar_grad(|x| x.mul(x).unwrap(), 3.0);
        assert_eq!(v, 9.0);
        assert_eq!(d, 6.0);
    }

    #[test]
    fn log_value_and_derivative() {
        assert_eq!(scalar_grad(|x| x.ln(), 1.0).0, 0.0);
        assert_eq!(scalar_grad(|x| x.ln(), 2.0).1, 0.5);
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let tape = Tape::new();
        let p = tape.var(Tensor::vector(vec![0.0, 0.0])).softmax();
        assert_eq!(p.value().data(), &[0.5, 0.5]);
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let p = tape.var(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(p.exp()),
            Err(AutodiffError::NonScalarLoss(_))
        ));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(2.0));
        let unused = tape.var(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let y = x.exp();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(unused).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn clip_subgradient_at_boundaries() {
        for (x, expected) in [(0.5, 0.0), (0.8, 1.0), (1.0, 1.0), (1.2, 1.0), (1.5, 0.0)] {
            let (_, d) = scalar_grad(|v| v.clip(0.8, 1.2).unwrap(), x);
            assert_eq!(d, expected, "x = {x}");
        }
    }

    #[test]
    fn clip_rejects_reversed_bounds() {
        let tape = Tape::new();
        let x = tape.var(Tensor::scalar(1.0));
        assert!(x.clip(1.2, 0.8).is_err());
    }

    #[test]
    fn minimum_tie_goes_to_first_argument() {
        let tape = Tape::new();
        let a = tape.var(Tensor::scalar(1.0));
        let b = tape.var(Tensor::scalar(1.0));
        let g = tape.backward(a.minimum(b).unwrap()).unwrap();
        assert_eq!(g.wrt(a).item(), Some(1.0));
        assert_eq!(g.wrt(b).item(), Some(0.0));
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // y = x*x + x  => dy/dx = 2x + 1
        let (_, d) = scalar_grad(|x| x.mul(x).unwrap().add(x).unwrap(), 3.0);
        assert_eq!(d, 7.0);
    }

    #[test]
    fn row_and_at_scatter_back() {
        let tape = Tape::new();
        let m = tape.var(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = m.row(1).unwrap().at(0).unwrap().scale(5.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(m).data(), &[0.0, 0.0, 5.0, 0.0]);
        assert!(m.row(2).is_err());
        assert!(m.at(0).is_err());
    }

    #[test]
    fn repeated_evaluation_is_bit_identical() {
        let run = || {
            let tape = Tape::new();
            let x = tape.var(Tensor::vector(vec![0.3, -1.7, 2.2]));
            let y = x.log_softmax().exp().mul(x).unwrap().sum();
            let g = tape.backward(y).unwrap();
            (y.item().unwrap().to_bits(), g.wrt(x).data().iter().map(|v| v.to_bits()).collect::<Vec<_>>())
        };
        assert_eq!(run(), run());
    }
}
