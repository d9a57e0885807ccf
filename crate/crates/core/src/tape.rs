//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive applied during a forward pass together
//! with its output value. [`Tape::backward`] walks the recorded nodes in
//! reverse, so the recording order is always a valid evaluation order and
//! each node pushes its adjoint into its inputs exactly once.
//!
//! ```
//! use contrastive_core::tape::Tape;
//! use contrastive_core::Tensor;
//!
//! let mut tape = Tape::new();
//! let a = tape.leaf(Tensor::from_rows(&[[1.0, 2.0]]).unwrap());
//! let b = tape.constant(Tensor::from_rows(&[[3.0], [4.0]]).unwrap());
//! let c = tape.matmul(a, b).unwrap();
//! let loss = tape.sum(c).unwrap();
//! let grads = tape.backward_scalar(loss).unwrap();
//! assert_eq!(grads.wrt(a).data(), &[3.0, 4.0]);
//! assert_eq!(grads.wrt(b).data(), &[0.0, 0.0]);
//! ```

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    index: usize,
}

impl Var {
    pub fn index(self) -> usize {
        self.index
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Leaf,
    Constant,
    MatMul,
    MatMulT,
    Add,
    Sub,
    Mul,
    Scale,
    SoftmaxRows,
    Relu,
    Tanh,
    Sigmoid,
    MeanRows,
    ConcatRows,
    ConcatCols,
    SelectRow,
    Sum,
    CrossEntropy,
    MeanScalars,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Constant,
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    SoftmaxRows(Var),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    MeanRows(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SelectRow(Var, usize),
    Sum(Var),
    /// `-ln softmax(logits)[target]` on a single row; caches the softmax.
    CrossEntropy {
        logits: Var,
        target: usize,
        probs: Tensor,
    },
    MeanScalars(Vec<Var>),
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Constant => OpKind::Constant,
            Op::MatMul(..) => OpKind::MatMul,
            Op::MatMulT(..) => OpKind::MatMulT,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::SoftmaxRows(_) => OpKind::SoftmaxRows,
            Op::Relu(_) => OpKind::Relu,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Sigmoid(_) => OpKind::Sigmoid,
            Op::MeanRows(_) => OpKind::MeanRows,
            Op::ConcatRows(_) => OpKind::ConcatRows,
            Op::ConcatCols(_) => OpKind::ConcatCols,
            Op::SelectRow(..) => OpKind::SelectRow,
            Op::Sum(_) => OpKind::Sum,
            Op::CrossEntropy { .. } => OpKind::CrossEntropy,
            Op::MeanScalars(_) => OpKind::MeanScalars,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

/// Single-owner record of one forward pass.
#[derive(Debug)]
pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    fault: Option<(OpKind, f64)>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            fault: None,
        }
    }

    /// Test hook: scales every adjoint produced by `kind` nodes by `factor`.
    /// Used as a negative control for gradient checking.
    #[doc(hidden)]
    pub fn inject_adjoint_fault(&mut self, kind: OpKind, factor: f64) {
        self.fault = Some((kind, factor));
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Records an input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Constant, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "var belongs to a different tape");
        &self.nodes[v.index].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.index].op.kind()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        let index = self.nodes.len();
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        if v.tape != self.id {
            return Err(Error::Usage("var belongs to a different tape"));
        }
        self.nodes
            .get(v.index)
            .ok_or(Error::Usage("var not recorded on this tape"))
    }

    fn grad_of(&self, vars: &[Var]) -> Result<bool> {
        let mut any = false;
        for &v in vars {
            any |= self.node(v)?.needs_grad;
        }
        Ok(any)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul(&self.node(a)?.value, &self.node(b)?.value)?;
        let g = self.grad_of(&[a, b])?;
        Ok(self.push(Op::MatMul(a, b), value, g))
    }

    /// `a · bᵀ`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = tensor::matmul_t(&self.node(a)?.value, &self.node(b)?.value)?;
        let g = self.grad_of(&[a, b])?;
        Ok(self.push(Op::MatMulT(a, b), value, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.node(a)?.value.add(&self.node(b)?.value)?;
        let g = self.grad_of(&[a, b])?;
        Ok(self.push(Op::Add(a, b), value, g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.node(a)?.value.sub(&self.node(b)?.value)?;
        let g = self.grad_of(&[a, b])?;
        Ok(self.push(Op::Sub(a, b), value, g))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.node(a)?.value.hadamard(&self.node(b)?.value)?;
        let g = self.grad_of(&[a, b])?;
        Ok(self.push(Op::Mul(a, b), value, g))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.node(a)?.value.scale(factor);
        let g = self.grad_of(&[a])?;
        Ok(self.push(Op::Scale(a, factor), value, g))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = tensor::softmax_rows(&self.node(a)?.value);
        let g = self.grad_of(&[a])?;
        Ok(self.push(Op::SoftmaxRows(a), value, g))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = tensor::relu(&self.node(a)?.value);
        let g = self.grad_of(&[a])?;
        Ok(self.push(Op::Relu(a), value, g))
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = tensor::tanh(&self.node(a)?.value);
        let g = self.grad_of(&[a])?;
        Ok(self.push(Op::Tanh(a), value, g))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = tensor::sigmoid(&self.node(a)?.value);
        let g = self.grad_of(&[a])?;
        Ok(self.push(Op::Sigmoid(a), value, g))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let value = tensor::mean_rows(&self.node(a)?.value)?;
        let g = self.grad_of(&[a])?;
        Ok(self.push(Op::MeanRows(a), value, g))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let values = parts
            .iter()
            .map(|&p| self.node(p).map(|n| &n.value))
            .collect::<Result<Vec<_>>>()?;
        let value = tensor::concat_rows(&values)?;
        let g = self.grad_of(parts)?;
        Ok(self.push(Op::ConcatRows(parts.to_vec()), value, g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let values = parts
            .iter()
            .map(|&p| self.node(p).map(|n| &n.value))
            .collect::<Result<Vec<_>>>()?;
        let value = tensor::concat_cols(&values)?;
        let g = self.grad_of(parts)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), value, g))
    }

    /// Row `row` of `a` as a `1 × cols` value (embedding lookup).
    pub fn select_row(&mut self, a: Var, row: usize) -> Result<Var> {
        let src = &self.node(a)?.value;
        if row >= src.rows() {
            return Err(Error::Shape {
                op: "select_row",
                left: src.shape(),
                right: (row, 0),
            });
        }
        let value = src.row_tensor(row);
        let g = self.grad_of(&[a])?;
        Ok(self.push(Op::SelectRow(a, row), value, g))
    }

    /// Sum of all entries as a `1 × 1` value.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::filled(1, 1, self.node(a)?.value.sum());
        let g = self.grad_of(&[a])?;
        Ok(self.push(Op::Sum(a), value, g))
    }

    /// Negative log-likelihood of `target` under `softmax(logits)`, where
    /// `logits` is a single row.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let l = &self.node(logits)?.value;
        if l.rows() != 1 {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: l.shape(),
                right: (1, l.cols()),
            });
        }
        if target >= l.cols() {
            return Err(Error::TokenOutOfRange {
                token: target,
                vocab: l.cols(),
            });
        }
        let max = l.data().iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + libm::log(l.data().iter().map(|v| libm::exp(v - max)).sum::<f64>());
        let value = Tensor::filled(1, 1, lse - l.get(0, target));
        let probs = tensor::softmax_rows(l);
        let g = self.grad_of(&[logits])?;
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                target,
                probs,
            },
            value,
            g,
        ))
    }

    /// Mean of `1 × 1` values.
    pub fn mean_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::EmptyInput("mean_scalars"));
        }
        let mut total = 0.0;
        for &p in parts {
            let v = &self.node(p)?.value;
            if v.shape() != (1, 1) {
                return Err(Error::Shape {
                    op: "mean_scalars",
                    left: (1, 1),
                    right: v.shape(),
                });
            }
            total += v.get(0, 0);
        }
        let value = Tensor::filled(1, 1, total / parts.len() as f64);
        let g = self.grad_of(parts)?;
        Ok(self.push(Op::MeanScalars(parts.to_vec()), value, g))
    }

    /// Backward pass from a `1 × 1` output with seed 1.
    pub fn backward_scalar(&self, output: Var) -> Result<Gradients> {
        self.backward(output, Tensor::filled(1, 1, 1.0))
    }

    /// Propagates `seed` (the adjoint of `output`) back to every node.
    pub fn backward(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Usage("backward called before any forward op"));
        }
        let out = self.node(output)?;
        if out.value.shape() != seed.shape() {
            return Err(Error::Shape {
                op: "backward seed",
                left: out.value.shape(),
                right: seed.shape(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[output.index] = Some(seed);

        for index in (0..=output.index).rev() {
            let node = &self.nodes[index];
            if !node.needs_grad {
                continue;
            }
            let Some(upstream) = grads[index].take() else {
                continue;
            };
            let factor = match self.fault {
                Some((kind, f)) if kind == node.op.kind() => f,
                _ => 1.0,
            };
            let send = |grads: &mut Vec<Option<Tensor>>, to: Var, g: Tensor| {
                if !self.nodes[to.index].needs_grad {
                    return;
                }
                let g = if factor != 1.0 { g.scale(factor) } else { g };
                match &mut grads[to.index] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
            };
            let val = |v: Var| &self.nodes[v.index].value;
            match &node.op {
                Op::Leaf | Op::Constant => {
                    grads[index] = Some(upstream);
                    continue;
                }
                Op::MatMul(a, b) => {
                    send(&mut grads, *a, tensor::matmul_t(&upstream, val(*b))?);
                    send(&mut grads, *b, tensor::t_matmul(val(*a), &upstream)?);
                }
                Op::MatMulT(a, b) => {
                    send(&mut grads, *a, tensor::matmul(&upstream, val(*b))?);
                    send(&mut grads, *b, tensor::t_matmul(&upstream, val(*a))?);
                }
                Op::Add(a, b) => {
                    send(&mut grads, *a, upstream.clone());
                    send(&mut grads, *b, upstream);
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *b, upstream.scale(-1.0));
                    send(&mut grads, *a, upstream);
                }
                Op::Mul(a, b) => {
                    send(&mut grads, *a, upstream.hadamard(val(*b))?);
                    send(&mut grads, *b, upstream.hadamard(val(*a))?);
                }
                Op::Scale(a, f) => send(&mut grads, *a, upstream.scale(*f)),
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let cols = y.cols();
                    let mut g = upstream;
                    for (gr, yr) in g.data_mut().chunks_mut(cols).zip(y.data().chunks(cols)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(g, y)| g * y).sum();
                        for (gv, yv) in gr.iter_mut().zip(yr) {
                            *gv = yv * (*gv - dot);
                        }
                    }
                    send(&mut grads, *a, g);
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let mut g = upstream;
                    for (gv, xv) in g.data_mut().iter_mut().zip(x.data()) {
                        if *xv <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    send(&mut grads, *a, g);
                }
                Op::Tanh(a) => {
                    let mut g = upstream;
                    for (gv, yv) in g.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= 1.0 - yv * yv;
                    }
                    send(&mut grads, *a, g);
                }
                Op::Sigmoid(a) => {
                    let mut g = upstream;
                    for (gv, yv) in g.data_mut().iter_mut().zip(node.value.data()) {
                        *gv *= yv * (1.0 - yv);
                    }
                    send(&mut grads, *a, g);
                }
                Op::MeanRows(a) => {
                    let x = val(*a);
                    let inv = 1.0 / x.rows() as f64;
                    let g = Tensor::from_fn(x.rows(), x.cols(), |_, j| upstream.get(0, j) * inv);
                    send(&mut grads, *a, g);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = val(p).shape();
                        let slice = upstream.data()[offset * c..(offset + r) * c].to_vec();
                        send(&mut grads, p, Tensor::new(r, c, slice)?);
                        offset += r;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let (r, c) = val(p).shape();
                        let g = Tensor::from_fn(r, c, |i, j| upstream.get(i, offset + j));
                        send(&mut grads, p, g);
                        offset += c;
                    }
                }
                Op::SelectRow(a, row) => {
                    let (r, c) = val(*a).shape();
                    let mut g = Tensor::zeros(r, c);
                    g.data_mut()[row * c..(row + 1) * c].copy_from_slice(upstream.data());
                    send(&mut grads, *a, g);
                }
                Op::Sum(a) => {
                    let (r, c) = val(*a).shape();
                    send(&mut grads, *a, Tensor::filled(r, c, upstream.get(0, 0)));
                }
                Op::CrossEntropy {
                    logits,
                    target,
                    probs,
                } => {
                    let s = upstream.get(0, 0);
                    let mut g = probs.scale(s);
                    g.data_mut()[*target] -= s;
                    send(&mut grads, *logits, g);
                }
                Op::MeanScalars(parts) => {
                    let share = upstream.get(0, 0) / parts.len() as f64;
                    for &p in parts {
                        send(&mut grads, p, Tensor::filled(1, 1, share));
                    }
                }
            }
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape()).collect();
        Ok(Gradients {
            tape: self.id,
            grads,
            shapes,
        })
    }
}

/// Adjoints of every recorded value after one backward pass.
#[derive(Debug, Clone)]
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Gradient with respect to `v`; zeros for constants or unreached nodes.
    pub fn wrt(&self, v: Var) -> Tensor {
        assert_eq!(v.tape, self.tape, "var belongs to a different tape");
        match &self.grads[v.index] {
            Some(g) => g.clone(),
            None => {
                let (r, c) = self.shapes[v.index];
                Tensor::zeros(r, c)
            }
        }
    }

    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{compare, finite_diff, Tolerance};
    use crate::rng;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn sum_of_matmul_gradient_is_ones_times_b_transpose() {
        let mut tape = Tape::new();
        let a = tape.leaf(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(t(&[&[5.0, 6.0], &[7.0, 8.0]]));
        let c = tape.matmul(a, b).unwrap();
        let s = tape.sum(c).unwrap();
        let g = tape.backward_scalar(s).unwrap();
        // ones(2x2) · Bᵀ = [[11, 15], [11, 15]]
        assert_eq!(g.wrt(a), t(&[&[11.0, 15.0], &[11.0, 15.0]]));
        assert_eq!(g.wrt(b), Tensor::zeros(2, 2));
        assert!(g.get(b).is_none());
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        let mut r = rng::seeded(17);
        let x0 = rng::uniform(&mut r, 3, 4, 1.0);
        let w = rng::uniform(&mut r, 3, 4, 1.0);
        let f = |x: &Tensor| tensor::softmax_rows(x).hadamard(&w).unwrap().sum();
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone());
        let wv = tape.constant(w.clone());
        let s = tape.softmax_rows(x).unwrap();
        let m = tape.mul(s, wv).unwrap();
        let out = tape.sum(m).unwrap();
        let analytic = tape.backward_scalar(out).unwrap().wrt(x);
        let numeric = finite_diff(f, &x0, 1e-5);
        let report = compare(
            &analytic,
            &numeric,
            Tolerance {
                rel: 1e-6,
                abs: 1e-9,
                small: 1e-9,
            },
        );
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn backward_before_forward_is_usage_error() {
        let tape = Tape::new();
        let mut other = Tape::new();
        let v = other.leaf(Tensor::zeros(1, 1));
        assert!(matches!(tape.backward_scalar(v), Err(Error::Usage(_))));
        let mut tape = Tape::new();
        tape.leaf(Tensor::zeros(1, 1));
        assert!(matches!(tape.backward_scalar(v), Err(Error::Usage(_))));
    }

    #[test]
    fn seed_shape_is_checked() {
        let mut tape = Tape::new();
        let v = tape.leaf(Tensor::zeros(2, 2));
        assert!(matches!(
            tape.backward(v, Tensor::zeros(1, 1)),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let mut r = rng::seeded(5);
        let mut tape = Tape::new();
        let a = tape.leaf(rng::uniform(&mut r, 3, 3, 1.0));
        let b = tape.leaf(rng::uniform(&mut r, 3, 3, 1.0));
        let c = tape.matmul_t(a, b).unwrap();
        let d = tape.softmax_rows(c).unwrap();
        let e = tape.tanh(d).unwrap();
        let f = tape.mean_rows(e).unwrap();
        let s = tape.sum(f).unwrap();
        let g1 = tape.backward_scalar(s).unwrap();
        let g2 = tape.backward_scalar(s).unwrap();
        for v in [a, b] {
            let x: Vec<u64> = g1.wrt(v).data().iter().map(|x| x.to_bits()).collect();
            let y: Vec<u64> = g2.wrt(v).data().iter().map(|x| x.to_bits()).collect();
            assert_eq!(x, y);
        }
    }

    #[test]
    fn cross_entropy_of_zero_logits_is_log_vocab() {
        let mut tape = Tape::new();
        let l = tape.leaf(Tensor::zeros(1, 12));
        let ce = tape.cross_entropy(l, 3).unwrap();
        assert!((tape.value(ce).get(0, 0) - libm::log(12.0)).abs() < 1e-12);
        assert!(tape.cross_entropy(l, 12).is_err());
    }

    #[test]
    fn shared_input_accumulates() {
        // d/dx sum(x ⊙ x) = 2x
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[&[1.5, -2.0]]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.backward_scalar(s).unwrap().wrt(x).data(), &[3.0, -4.0]);
    }
}
