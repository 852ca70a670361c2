//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! creation order, which is already a topological order: a node can only
//! reference nodes created before it. [`Tape::backward`] sweeps the tape
//! once in reverse and returns a [`Grads`] table holding the adjoint of
//! every node plus per-parameter sums.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

static NEXT_PARAM_ID: AtomicU64 = AtomicU64::new(1);

/// Identity of a trainable tensor; survives `clone()` so optimizer state and
/// checkpoints keep referring to the same slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(u64);

impl ParamId {
    pub fn fresh() -> Self {
        ParamId(NEXT_PARAM_ID.fetch_add(1, Ordering::Relaxed))
    }
}

/// A trainable tensor with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct Param<S> {
    id: ParamId,
    pub value: Tensor<S>,
    pub grad: Tensor<S>,
    /// Frozen parameters enter the tape as constants.
    pub frozen: bool,
}

impl<S: Scalar> Param<S> {
    pub fn new(value: Tensor<S>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            id: ParamId::fresh(),
            value,
            grad,
            frozen: false,
        }
    }

    pub fn id(&self) -> ParamId {
        self.id
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(S::zero());
    }

    /// Adds this parameter's entry from `grads`, if any.
    pub fn accumulate(&mut self, grads: &Grads<S>) {
        if let Some(g) = grads.param(self.id) {
            self.grad.add_assign(g);
        }
    }
}

#[derive(Clone, Debug)]
enum Op<S> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, S),
    Offset(usize),
    MatMul(usize, usize),
    AddRow(usize, usize),
    MulCol(usize, usize),
    Tanh(usize),
    Softplus(usize),
    Sigmoid(usize),
    Silu(usize),
    Exp(usize),
    Ln(usize),
    Square(usize),
    Sum(usize),
    SumCols(usize),
    MeanRows(usize),
    Concat(Vec<usize>),
    SliceCols(usize, usize),
    SliceRows(usize, usize),
    Min(usize, usize),
    Clamp(usize, S, S),
    Select(usize, usize, Vec<bool>),
    GradScale(usize, S),
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Operation recorder. One tape per forward/backward pass.
pub struct Tape<S> {
    nodes: RefCell<Vec<Node<S>>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, S: Scalar> {
    tape: &'t Tape<S>,
    id: usize,
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<S>, op: Op<S>, requires_grad: bool, param: Option<ParamId>) -> usize {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
            param,
        });
        nodes.len() - 1
    }

    /// A leaf that never receives gradient.
    pub fn constant(&self, value: Tensor<S>) -> Var<'_, S> {
        let id = self.push(value, Op::Leaf, false, None);
        Var { tape: self, id }
    }

    /// A differentiable leaf that is not a parameter (inputs probed in tests).
    pub fn input(&self, value: Tensor<S>) -> Var<'_, S> {
        let id = self.push(value, Op::Leaf, true, None);
        Var { tape: self, id }
    }

    /// Records a parameter; frozen parameters become constants.
    pub fn param(&self, p: &Param<S>) -> Var<'_, S> {
        let id = self.push(p.value.clone(), Op::Leaf, !p.frozen, Some(p.id));
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Tensor<S> {
        self.nodes.borrow()[id].value.clone()
    }

    fn rg(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn unary(&self, a: usize, op: Op<S>, f: impl FnOnce(&Tensor<S>) -> Tensor<S>) -> usize {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (f(&nodes[a].value), nodes[a].requires_grad)
        };
        self.push(value, op, rg, None)
    }

    fn binary(
        &self,
        a: usize,
        b: usize,
        op: Op<S>,
        f: impl FnOnce(&Tensor<S>, &Tensor<S>) -> Tensor<S>,
    ) -> usize {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (
                f(&nodes[a].value, &nodes[b].value),
                nodes[a].requires_grad || nodes[b].requires_grad,
            )
        };
        self.push(value, op, rg, None)
    }

    /// Concatenates along columns.
    pub fn concat_cols<'t>(&'t self, parts: &[Var<'t, S>]) -> Var<'t, S> {
        assert!(!parts.is_empty(), "concat of nothing");
        let ids: Vec<usize> = parts.iter().map(|v| v.id).collect();
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            let vals: Vec<&Tensor<S>> = ids.iter().map(|&i| &nodes[i].value).collect();
            (
                Tensor::hstack(&vals),
                ids.iter().any(|&i| nodes[i].requires_grad),
            )
        };
        let id = self.push(value, Op::Concat(ids), rg, None);
        Var { tape: self, id }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var<'_, S>) -> Result<Grads<S>> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Contract("loss belongs to another tape".into()));
        }
        let nodes = self.nodes.borrow();
        let n = nodes.len();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor<S>>> = vec![None; n];
        let mut visits = vec![0u32; n];
        adj[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), S::one()));

        for i in (0..=loss.id).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(g) = adj[i].take() else { continue };
            visits[i] += 1;
            let node = &nodes[i];
            let val = |j: usize| &nodes[j].value;
            let send = |j: usize, d: Tensor<S>, adj: &mut Vec<Option<Tensor<S>>>| {
                if !nodes[j].requires_grad {
                    return;
                }
                match &mut adj[j] {
                    Some(acc) => acc.add_assign(&d),
                    slot @ None => *slot = Some(d),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(*a, g.clone(), &mut adj);
                    send(*b, g.clone(), &mut adj);
                }
                Op::Sub(a, b) => {
                    send(*a, g.clone(), &mut adj);
                    send(*b, g.scale(-S::one()), &mut adj);
                }
                Op::Mul(a, b) => {
                    send(*a, g.mul(val(*b)), &mut adj);
                    send(*b, g.mul(val(*a)), &mut adj);
                }
                Op::Neg(a) => send(*a, g.scale(-S::one()), &mut adj),
                Op::Scale(a, k) => send(*a, g.scale(*k), &mut adj),
                Op::Offset(a) => send(*a, g.clone(), &mut adj),
                Op::GradScale(a, k) => send(*a, g.scale(*k), &mut adj),
                Op::MatMul(a, b) => {
                    if nodes[*a].requires_grad {
                        send(*a, g.matmul(&val(*b).transpose()), &mut adj);
                    }
                    if nodes[*b].requires_grad {
                        send(*b, val(*a).transpose().matmul(&g), &mut adj);
                    }
                }
                Op::AddRow(a, row) => {
                    send(*a, g.clone(), &mut adj);
                    if nodes[*row].requires_grad {
                        send(*row, column_sums(&g), &mut adj);
                    }
                }
                Op::MulCol(a, col) => {
                    let (x, c) = (val(*a), val(*col));
                    let cols = x.cols();
                    if nodes[*a].requires_grad {
                        let mut d = g.clone();
                        for (k, v) in d.data_mut().iter_mut().enumerate() {
                            *v = *v * c.data()[k / cols];
                        }
                        send(*a, d, &mut adj);
                    }
                    if nodes[*col].requires_grad {
                        let mut d = Tensor::zeros(c.shape());
                        for (k, (&gv, &xv)) in g.data().iter().zip(x.data()).enumerate() {
                            d.data_mut()[k / cols] = d.data()[k / cols] + gv * xv;
                        }
                        send(*col, d, &mut adj);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    send(*a, g.zip_map(y, |gv, yv| gv * (S::one() - yv * yv)), &mut adj);
                }
                Op::Softplus(a) => {
                    send(*a, g.zip_map(val(*a), |gv, x| gv * sigmoid(x)), &mut adj);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    send(*a, g.zip_map(y, |gv, yv| gv * yv * (S::one() - yv)), &mut adj);
                }
                Op::Silu(a) => {
                    send(
                        *a,
                        g.zip_map(val(*a), |gv, x| {
                            let s = sigmoid(x);
                            gv * s * (S::one() + x * (S::one() - s))
                        }),
                        &mut adj,
                    );
                }
                Op::Exp(a) => send(*a, g.mul(&node.value), &mut adj),
                Op::Ln(a) => send(*a, g.zip_map(val(*a), |gv, x| gv / x), &mut adj),
                Op::Square(a) => {
                    send(*a, g.zip_map(val(*a), |gv, x| gv * x * S::of(2.0)), &mut adj)
                }
                Op::Sum(a) => {
                    let gv = g.item();
                    send(*a, Tensor::full(val(*a).shape(), gv), &mut adj);
                }
                Op::SumCols(a) => {
                    let x = val(*a);
                    let cols = x.cols();
                    let mut d = Tensor::zeros(x.shape());
                    for (k, v) in d.data_mut().iter_mut().enumerate() {
                        *v = g.data()[k / cols];
                    }
                    send(*a, d, &mut adj);
                }
                Op::MeanRows(a) => {
                    let x = val(*a);
                    let (rows, cols) = (x.rows(), x.cols());
                    let inv = S::one() / S::of(rows as f64);
                    let mut d = Tensor::zeros(x.shape());
                    for (k, v) in d.data_mut().iter_mut().enumerate() {
                        *v = g.data()[k % cols] * inv;
                    }
                    send(*a, d, &mut adj);
                }
                Op::Concat(ids) => {
                    let mut start = 0;
                    for &j in ids {
                        let w = nodes[j].value.cols();
                        if nodes[j].requires_grad {
                            send(j, g.slice_cols(start, w), &mut adj);
                        }
                        start += w;
                    }
                }
                Op::SliceCols(a, start) => {
                    let x = val(*a);
                    let w = g.cols();
                    let mut d = Tensor::zeros(x.shape());
                    let xc = x.cols();
                    for r in 0..x.rows() {
                        for c in 0..w {
                            d.data_mut()[r * xc + start + c] = g.at(r, c);
                        }
                    }
                    send(*a, d, &mut adj);
                }
                Op::SliceRows(a, start) => {
                    let x = val(*a);
                    let cols = x.cols();
                    let mut d = Tensor::zeros(x.shape());
                    d.data_mut()[start * cols..start * cols + g.len()].copy_from_slice(g.data());
                    send(*a, d, &mut adj);
                }
                Op::Min(a, b) => {
                    let (x, y) = (val(*a), val(*b));
                    let mut da = g.clone();
                    let mut db = g.clone();
                    for k in 0..g.len() {
                        if x.data()[k] <= y.data()[k] {
                            db.data_mut()[k] = S::zero();
                        } else {
                            da.data_mut()[k] = S::zero();
                        }
                    }
                    send(*a, da, &mut adj);
                    send(*b, db, &mut adj);
                }
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    send(
                        *a,
                        g.zip_map(val(*a), |gv, x| if x > lo && x < hi { gv } else { S::zero() }),
                        &mut adj,
                    );
                }
                Op::Select(a, b, mask) => {
                    let mut da = g.clone();
                    let mut db = g.clone();
                    for (k, &m) in mask.iter().enumerate() {
                        if m {
                            db.data_mut()[k] = S::zero();
                        } else {
                            da.data_mut()[k] = S::zero();
                        }
                    }
                    send(*a, da, &mut adj);
                    send(*b, db, &mut adj);
                }
            }
            adj[i] = Some(g);
        }

        let mut params: HashMap<ParamId, Tensor<S>> = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if let (Some(pid), Some(g)) = (node.param, &adj[i]) {
                params
                    .entry(pid)
                    .and_modify(|acc| acc.add_assign(g))
                    .or_insert_with(|| g.clone());
            }
        }
        Ok(Grads {
            adjoints: adj,
            params,
            visits,
        })
    }
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn softplus<S: Scalar>(x: S) -> S {
    // log(1 + e^x) = max(x, 0) + log1p(e^{-|x|})
    x.max(S::zero()) + (-x.abs()).exp().ln_1p()
}

fn column_sums<S: Scalar>(g: &Tensor<S>) -> Tensor<S> {
    let cols = g.cols();
    let mut out = Tensor::zeros(&[1, cols]);
    for (k, &v) in g.data().iter().enumerate() {
        out.data_mut()[k % cols] = out.data()[k % cols] + v;
    }
    out
}

/// Output of a reverse sweep.
pub struct Grads<S> {
    adjoints: Vec<Option<Tensor<S>>>,
    params: HashMap<ParamId, Tensor<S>>,
    visits: Vec<u32>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient of the loss with respect to `v`; `None` when no gradient
    /// reached it (constants, stopped or unrelated nodes).
    pub fn wrt(&self, v: Var<'_, S>) -> Option<&Tensor<S>> {
        self.adjoints.get(v.id).and_then(Option::as_ref)
    }

    /// Summed gradient over every use of a parameter on the tape.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<S>> {
        self.params.get(&id)
    }

    /// How many times each node was processed during the sweep.
    pub fn visit_counts(&self) -> &[u32] {
        &self.visits
    }
}

impl<'t, S: Scalar> Var<'t, S> {
    pub fn tape(&self) -> &'t Tape<S> {
        self.tape
    }

    pub fn value(&self) -> Tensor<S> {
        self.tape.value_of(self.id)
    }

    pub fn item(&self) -> S {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn rows(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.rows()
    }

    pub fn cols(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.cols()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.rg(self.id)
    }

    fn wrap(&self, id: usize) -> Self {
        Var { tape: self.tape, id }
    }

    fn same_tape(&self, o: &Self) {
        assert!(std::ptr::eq(self.tape, o.tape), "vars from different tapes");
    }

    pub fn add(self, o: Self) -> Self {
        self.same_tape(&o);
        self.wrap(self.tape.binary(self.id, o.id, Op::Add(self.id, o.id), |a, b| a.add(b)))
    }

    pub fn sub(self, o: Self) -> Self {
        self.same_tape(&o);
        self.wrap(self.tape.binary(self.id, o.id, Op::Sub(self.id, o.id), |a, b| a.sub(b)))
    }

    /// Elementwise product.
    pub fn mul(self, o: Self) -> Self {
        self.same_tape(&o);
        self.wrap(self.tape.binary(self.id, o.id, Op::Mul(self.id, o.id), |a, b| a.mul(b)))
    }

    pub fn neg(self) -> Self {
        self.wrap(self.tape.unary(self.id, Op::Neg(self.id), |a| a.scale(-S::one())))
    }

    pub fn scale(self, k: S) -> Self {
        self.wrap(self.tape.unary(self.id, Op::Scale(self.id, k), |a| a.scale(k)))
    }

    pub fn offset(self, k: S) -> Self {
        self.wrap(self.tape.unary(self.id, Op::Offset(self.id), |a| a.map(|x| x + k)))
    }

    pub fn matmul(self, o: Self) -> Self {
        self.same_tape(&o);
        self.wrap(
            self.tape
                .binary(self.id, o.id, Op::MatMul(self.id, o.id), |a, b| a.matmul(b)),
        )
    }

    /// Adds a `[1, cols]` row to every row.
    pub fn add_row(self, row: Self) -> Self {
        self.same_tape(&row);
        self.wrap(self.tape.binary(self.id, row.id, Op::AddRow(self.id, row.id), |a, r| {
            assert_eq!(r.len(), a.cols(), "add_row width");
            let cols = a.cols();
            let mut out = a.clone();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                *v = *v + r.data()[k % cols];
            }
            out
        }))
    }

    /// Multiplies row `i` by entry `i` of a `[rows, 1]` column.
    pub fn mul_col(self, col: Self) -> Self {
        self.same_tape(&col);
        self.wrap(self.tape.binary(self.id, col.id, Op::MulCol(self.id, col.id), |a, c| {
            assert_eq!(c.len(), a.rows(), "mul_col height");
            let cols = a.cols();
            let mut out = a.clone();
            for (k, v) in out.data_mut().iter_mut().enumerate() {
                *v = *v * c.data()[k / cols];
            }
            out
        }))
    }

    pub fn tanh(self) -> Self {
        self.wrap(self.tape.unary(self.id, Op::Tanh(self.id), |a| a.map(S::tanh)))
    }

    pub fn softplus(self) -> Self {
        self.wrap(self.tape.unary(self.id, Op::Softplus(self.id), |a| a.map(softplus)))
    }

    pub fn sigmoid(self) -> Self {
        self.wrap(self.tape.unary(self.id, Op::Sigmoid(self.id), |a| a.map(sigmoid)))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(self) -> Self {
        self.wrap(
            self.tape
                .unary(self.id, Op::Silu(self.id), |a| a.map(|x| x * sigmoid(x))),
        )
    }

    pub fn exp(self) -> Self {
        self.wrap(self.tape.unary(self.id, Op::Exp(self.id), |a| a.map(S::exp)))
    }

    pub fn ln(self) -> Self {
        self.wrap(self.tape.unary(self.id, Op::Ln(self.id), |a| a.map(S::ln)))
    }

    pub fn square(self) -> Self {
        self.wrap(self.tape.unary(self.id, Op::Square(self.id), |a| a.map(|x| x * x)))
    }

    /// Sum of all entries, as a `[1, 1]` scalar.
    pub fn sum(self) -> Self {
        self.wrap(
            self.tape
                .unary(self.id, Op::Sum(self.id), |a| Tensor::scalar(a.sum())),
        )
    }

    pub fn mean(self) -> Self {
        let n = S::of(self.value_len() as f64);
        self.sum().scale(S::one() / n)
    }

    fn value_len(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.len()
    }

    /// Per-row sums, `[rows, cols] -> [rows, 1]`.
    pub fn sum_cols(self) -> Self {
        self.wrap(self.tape.unary(self.id, Op::SumCols(self.id), |a| {
            let data = (0..a.rows()).map(|r| a.row_slice(r).iter().copied().sum()).collect();
            Tensor::matrix(a.rows(), 1, data).expect("shape")
        }))
    }

    /// Per-column means, `[rows, cols] -> [1, cols]`.
    pub fn mean_rows(self) -> Self {
        self.wrap(self.tape.unary(self.id, Op::MeanRows(self.id), |a| {
            column_sums(a).scale(S::one() / S::of(a.rows() as f64))
        }))
    }

    pub fn slice_cols(self, start: usize, len: usize) -> Self {
        self.wrap(
            self.tape
                .unary(self.id, Op::SliceCols(self.id, start), |a| a.slice_cols(start, len)),
        )
    }

    pub fn slice_rows(self, start: usize, len: usize) -> Self {
        self.wrap(self.tape.unary(self.id, Op::SliceRows(self.id, start), |a| {
            let idx: Vec<usize> = (start..start + len).collect();
            a.select_rows(&idx)
        }))
    }

    /// Elementwise minimum; ties route the gradient to `self`.
    pub fn min(self, o: Self) -> Self {
        self.same_tape(&o);
        self.wrap(self.tape.binary(self.id, o.id, Op::Min(self.id, o.id), |a, b| {
            a.zip_map(b, |x, y| if x <= y { x } else { y })
        }))
    }

    /// Clips into `[lo, hi]`; zero gradient outside the open interval.
    pub fn clamp(self, lo: S, hi: S) -> Self {
        self.wrap(
            self.tape
                .unary(self.id, Op::Clamp(self.id, lo, hi), |a| a.map(|x| x.max(lo).min(hi))),
        )
    }

    /// Elementwise `mask ? self : other`.
    pub fn select(self, mask: &[bool], other: Self) -> Self {
        self.same_tape(&other);
        let m = mask.to_vec();
        self.wrap(self.tape.binary(
            self.id,
            other.id,
            Op::Select(self.id, other.id, m.clone()),
            move |a, b| {
                assert_eq!(m.len(), a.len(), "select mask length");
                let mut out = b.clone();
                for (k, &keep) in m.iter().enumerate() {
                    if keep {
                        out.data_mut()[k] = a.data()[k];
                    }
                }
                out
            },
        ))
    }

    /// Same value; backward treats the result as a constant.
    pub fn stop_gradient(self) -> Self {
        let v = self.value();
        self.tape.constant(v)
    }

    /// Same value; the gradient flowing back through it is multiplied by `k`.
    pub fn scale_grad(self, k: S) -> Self {
        self.wrap(self.tape.unary(self.id, Op::GradScale(self.id, k), |a| a.clone()))
    }
}

/// Forward value identical to `x`, but no gradient flows back through it.
pub fn stop_gradient<'t, S: Scalar>(x: Var<'t, S>) -> Var<'t, S> {
    x.stop_gradient()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn s(x: f64) -> Tensor<f64> {
        Tensor::scalar(x)
    }

    #[test]
    fn scale_grad_keeps_value() {
        let tape = Tape::new();
        let x = tape.input(s(3.0));
        let y = x.square().scale_grad(0.25);
        assert_eq!(y.item(), 9.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 1.5);
    }

    #[test]
    fn square_derivative() {
        let tape = Tape::new();
        let x = tape.input(s(3.0));
        let y = x.square();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 6.0);
    }

    #[test]
    fn constant_leaf_has_no_grad() {
        let tape = Tape::new();
        let x = tape.input(s(2.0));
        let c = tape.constant(s(5.0));
        let g = tape.backward(x.mul(c)).unwrap();
        assert!(g.wrt(c).is_none());
        assert_eq!(g.wrt(x).unwrap().item(), 5.0);
    }

    #[test]
    fn stop_gradient_blocks_one_branch() {
        let tape = Tape::new();
        let x = tape.input(s(2.0));
        let y = stop_gradient(x).mul(x);
        assert_eq!(y.item(), 4.0);
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item(), 2.0);
    }

    #[test]
    fn fully_stopped_loss_gives_no_grads() {
        let tape = Tape::new();
        let x = tape.input(Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap());
        let loss = x.stop_gradient().square().sum();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(x).is_none());
    }

    #[test]
    fn stop_gradient_preserves_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let x = tape.input(Tensor::<f64>::randn(&[4, 5], 1.0, &mut rng));
        assert!(x.stop_gradient().value().bit_eq(&x.value()));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let tape = Tape::new();
        let x = tape.input(Tensor::<f64>::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn repeated_param_use_sums() {
        let p = Param::new(s(1.5));
        let tape = Tape::new();
        let a = tape.param(&p);
        let b = tape.param(&p);
        let g = tape.backward(a.mul(b)).unwrap();
        assert_eq!(g.param(p.id()).unwrap().item(), 3.0);
    }

    #[test]
    fn frozen_param_is_constant() {
        let mut p = Param::new(s(1.5));
        p.frozen = true;
        let tape = Tape::new();
        let a = tape.param(&p);
        let g = tape.backward(a.square()).unwrap();
        assert!(g.param(p.id()).is_none());
    }

    #[test]
    fn each_node_visited_at_most_once() {
        let tape = Tape::new();
        let x = tape.input(s(0.7));
        let mut y = x;
        for _ in 0..5 {
            y = y.mul(x).add(y.tanh());
        }
        let g = tape.backward(y).unwrap();
        assert!(g.visit_counts().iter().all(|&c| c <= 1));
        assert_eq!(g.visit_counts().iter().filter(|&&c| c == 1).count(), tape.len());
    }

    #[test]
    fn ppo_style_clip_kills_gradient_above_bound() {
        let tape = Tape::new();
        let ratio = tape.input(s(1.5));
        let adv = tape.constant(s(2.0));
        let clipped = ratio.clamp(0.9, 1.1);
        let obj = ratio.mul(adv).min(clipped.mul(adv));
        let g = tape.backward(obj).unwrap();
        assert_eq!(g.wrt(ratio).map_or(0.0, |t| t.item()), 0.0);
    }
}
