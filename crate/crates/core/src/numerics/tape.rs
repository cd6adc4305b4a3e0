//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as it executes; [`Tape::backward`]
//! replays the record once, in reverse, accumulating gradients into each
//! node. Tapes are rebuilt per forward pass — the two-stage pipeline
//! changes graph topology per batch — and are single-owner (`Rc`, not
//! `Arc`; a tape never crosses threads).

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

/// Handle to one node on a tape. Cheap to clone.
#[derive(Clone)]
pub struct Value {
    tape: Tape,
    idx: usize,
}

struct TapeInner {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    grads: Vec<Option<Tensor>>,
    // gradient scale hooks, applied to a node's accumulated gradient
    // before it propagates into the node's inputs
    hooks: HashMap<usize, f64>,
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Exp(usize),
    Relu(usize),
    Softplus(usize),
    Sqrt(usize),
    ClampMin(usize, f64),
    Scale(usize, f64),
    MulScalarNode(usize, usize),
    Matmul(usize, usize),
    VecMat(usize, usize),
    MatVec(usize, usize),
    Outer(usize, usize),
    Dot(usize, usize),
    MulRows(usize, usize),
    AddRowBroadcast(usize, usize),
    Transpose(usize),
    Slice0(usize, usize, usize),
    Concat0(Vec<usize>),
    StackRows(Vec<usize>),
    SumAll(usize),
    RmsNorm(usize, f64),
    SoftmaxRows(usize),
    CrossEntropy(usize, Vec<Option<usize>>),
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(TapeInner {
                values: Vec::new(),
                ops: Vec::new(),
                grads: Vec::new(),
                hooks: HashMap::new(),
            })),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Insert a tensor as a leaf node (parameter or input).
    pub fn leaf(&self, t: Tensor) -> Value {
        self.push(t, Op::Leaf)
    }

    pub fn scalar(&self, v: f64) -> Value {
        self.leaf(Tensor::scalar(v))
    }

    fn push(&self, value: Tensor, op: Op) -> Value {
        let mut inner = self.inner.borrow_mut();
        let idx = inner.values.len();
        inner.values.push(value);
        inner.ops.push(op);
        inner.grads.push(None);
        Value {
            tape: self.clone(),
            idx,
        }
    }

    fn same_tape(&self, v: &Value) -> Result<()> {
        if !Rc::ptr_eq(&self.inner, &v.tape.inner) {
            return Err(Error::contract("values belong to different tapes"));
        }
        Ok(())
    }

    /// Concatenate nodes along axis 0.
    pub fn concat0(&self, parts: &[Value]) -> Result<Value> {
        for p in parts {
            self.same_tape(p)?;
        }
        let inner = self.inner.borrow();
        let tensors: Vec<&Tensor> = parts.iter().map(|p| &inner.values[p.idx]).collect();
        let out = Tensor::concat0(&tensors)?;
        drop(inner);
        Ok(self.push(out, Op::Concat0(parts.iter().map(|p| p.idx).collect())))
    }

    /// Stack vector nodes as matrix rows.
    pub fn stack_rows(&self, rows: &[Value]) -> Result<Value> {
        for r in rows {
            self.same_tape(r)?;
        }
        let inner = self.inner.borrow();
        let tensors: Vec<&Tensor> = rows.iter().map(|r| &inner.values[r.idx]).collect();
        let out = Tensor::stack_rows(&tensors)?;
        drop(inner);
        Ok(self.push(out, Op::StackRows(rows.iter().map(|r| r.idx).collect())))
    }

    /// Mean cross-entropy of row-wise logits against `targets`; `None`
    /// rows are unsupervised and contribute nothing.
    pub fn cross_entropy(&self, logits: &Value, targets: &[Option<usize>]) -> Result<Value> {
        self.same_tape(logits)?;
        let inner = self.inner.borrow();
        let l = &inner.values[logits.idx];
        if l.shape().len() != 2 || l.shape()[0] != targets.len() {
            return Err(Error::contract(format!(
                "cross_entropy: logits shape {:?} vs {} target rows",
                l.shape(),
                targets.len()
            )));
        }
        let cols = l.shape()[1];
        let mut total = 0.0;
        let mut count = 0usize;
        for (i, t) in targets.iter().enumerate() {
            if let Some(t) = t {
                if *t >= cols {
                    return Err(Error::contract(format!(
                        "cross_entropy: target {t} out of vocabulary {cols}"
                    )));
                }
                let row = &l.data()[i * cols..(i + 1) * cols];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[*t];
                count += 1;
            }
        }
        if count == 0 {
            return Err(Error::contract("cross_entropy: no supervised positions"));
        }
        drop(inner);
        Ok(self.push(
            Tensor::scalar(total / count as f64),
            Op::CrossEntropy(logits.idx, targets.to_vec()),
        ))
    }

    /// Register a multiplicative gradient hook: during backward, the
    /// gradient accumulated at `v` is scaled by `factor` before it
    /// flows into `v`'s inputs.
    pub fn scale_grad(&self, v: &Value, factor: f64) {
        self.inner.borrow_mut().hooks.insert(v.idx, factor);
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: &Value) -> Result<()> {
        self.same_tape(loss)?;
        let mut inner = self.inner.borrow_mut();
        if inner.values[loss.idx].len() != 1 {
            return Err(Error::contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                inner.values[loss.idx].shape()
            )));
        }
        let n = inner.values.len();
        inner.grads = (0..n).map(|_| None).collect();
        inner.grads[loss.idx] = Some(Tensor::scalar(1.0));

        let TapeInner {
            values,
            ops,
            grads,
            hooks,
        } = &mut *inner;

        for idx in (0..=loss.idx).rev() {
            let Some(mut g) = grads[idx].take() else {
                continue;
            };
            if let Some(&f) = hooks.get(&idx) {
                g = g.scale(f);
            }
            backprop_op(&ops[idx], idx, &g, values, grads);
            grads[idx] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward pass w.r.t. `v` (zeros if the loss
    /// never reached it).
    pub fn grad(&self, v: &Value) -> Tensor {
        let inner = self.inner.borrow();
        match &inner.grads[v.idx] {
            Some(g) => g.clone(),
            None => Tensor::zeros(inner.values[v.idx].shape()),
        }
    }
}

impl Value {
    pub fn index(&self) -> usize {
        self.idx
    }

    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    /// Snapshot of this node's tensor.
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().values[self.idx].clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.inner.borrow().values[self.idx].shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.inner.borrow().values[self.idx].item()
    }

    fn unary(&self, out: Tensor, op: Op) -> Value {
        self.tape.push(out, op)
    }

    fn with<T>(&self, f: impl FnOnce(&Tensor) -> T) -> T {
        f(&self.tape.inner.borrow().values[self.idx])
    }

    fn with2<T>(&self, other: &Value, f: impl FnOnce(&Tensor, &Tensor) -> T) -> Result<T> {
        self.tape.same_tape(other)?;
        let inner = self.tape.inner.borrow();
        Ok(f(&inner.values[self.idx], &inner.values[other.idx]))
    }

    pub fn add(&self, other: &Value) -> Result<Value> {
        let out = self.with2(other, |a, b| a.add(b))??;
        Ok(self.unary(out, Op::Add(self.idx, other.idx)))
    }

    pub fn sub(&self, other: &Value) -> Result<Value> {
        let out = self.with2(other, |a, b| a.sub(b))??;
        Ok(self.unary(out, Op::Sub(self.idx, other.idx)))
    }

    pub fn mul(&self, other: &Value) -> Result<Value> {
        let out = self.with2(other, |a, b| a.mul(b))??;
        Ok(self.unary(out, Op::Mul(self.idx, other.idx)))
    }

    pub fn div(&self, other: &Value) -> Result<Value> {
        let out = self.with2(other, |a, b| a.div(b))??;
        Ok(self.unary(out, Op::Div(self.idx, other.idx)))
    }

    pub fn exp(&self) -> Value {
        let out = self.with(|a| a.exp());
        self.unary(out, Op::Exp(self.idx))
    }

    pub fn relu(&self) -> Value {
        let out = self.with(|a| a.relu());
        self.unary(out, Op::Relu(self.idx))
    }

    pub fn softplus(&self) -> Value {
        let out = self.with(|a| a.softplus());
        self.unary(out, Op::Softplus(self.idx))
    }

    pub fn sqrt(&self) -> Value {
        let out = self.with(|a| {
            Tensor::from_vec(a.shape().to_vec(), a.data().iter().map(|v| v.sqrt()).collect())
        });
        self.unary(out, Op::Sqrt(self.idx))
    }

    pub fn clamp_min(&self, floor: f64) -> Value {
        let out = self.with(|a| a.clamp_min(floor));
        self.unary(out, Op::ClampMin(self.idx, floor))
    }

    pub fn scale(&self, c: f64) -> Value {
        let out = self.with(|a| a.scale(c));
        self.unary(out, Op::Scale(self.idx, c))
    }

    /// Multiply by a single-element node, broadcast over all entries.
    pub fn mul_scalar(&self, s: &Value) -> Result<Value> {
        let out = self.with2(s, |a, sc| a.scale(sc.item()))?;
        Ok(self.unary(out, Op::MulScalarNode(self.idx, s.idx)))
    }

    pub fn matmul(&self, other: &Value) -> Result<Value> {
        let out = self.with2(other, |a, b| a.matmul(b))??;
        Ok(self.unary(out, Op::Matmul(self.idx, other.idx)))
    }

    pub fn vecmat(&self, w: &Value) -> Result<Value> {
        let out = self.with2(w, |a, b| a.vecmat(b))??;
        Ok(self.unary(out, Op::VecMat(self.idx, w.idx)))
    }

    pub fn matvec(&self, v: &Value) -> Result<Value> {
        let out = self.with2(v, |a, b| a.matvec(b))??;
        Ok(self.unary(out, Op::MatVec(self.idx, v.idx)))
    }

    pub fn outer(&self, other: &Value) -> Result<Value> {
        let out = self.with2(other, |a, b| a.outer(b))??;
        Ok(self.unary(out, Op::Outer(self.idx, other.idx)))
    }

    pub fn dot(&self, other: &Value) -> Result<Value> {
        let out = self.with2(other, |a, b| a.dot(b))??;
        Ok(self.unary(Tensor::scalar(out), Op::Dot(self.idx, other.idx)))
    }

    pub fn mul_rows(&self, v: &Value) -> Result<Value> {
        let out = self.with2(v, |a, b| a.mul_rows(b))??;
        Ok(self.unary(out, Op::MulRows(self.idx, v.idx)))
    }

    pub fn add_row_broadcast(&self, b: &Value) -> Result<Value> {
        let out = self.with2(b, |a, bb| a.add_row_broadcast(bb))??;
        Ok(self.unary(out, Op::AddRowBroadcast(self.idx, b.idx)))
    }

    pub fn transpose(&self) -> Result<Value> {
        let out = self.with(|a| a.transpose())?;
        Ok(self.unary(out, Op::Transpose(self.idx)))
    }

    pub fn slice0(&self, start: usize, end: usize) -> Result<Value> {
        let out = self.with(|a| a.slice0(start, end))?;
        Ok(self.unary(out, Op::Slice0(self.idx, start, end)))
    }

    /// Row `i` of a matrix node as a vector node. Shares `Op::Slice0`
    /// in backward, which only needs lengths and the start offset.
    pub fn row(&self, i: usize) -> Result<Value> {
        let out = self.with(|a| a.row(i))?;
        Ok(self.unary(out, Op::Slice0(self.idx, i, i + 1)))
    }

    pub fn sum(&self) -> Value {
        let out = self.with(|a| Tensor::scalar(a.data().iter().sum()));
        self.unary(out, Op::SumAll(self.idx))
    }

    pub fn rms_norm(&self, eps: f64) -> Value {
        let out = self.with(|a| a.rms_norm(eps));
        self.unary(out, Op::RmsNorm(self.idx, eps))
    }

    pub fn softmax_rows(&self) -> Value {
        let out = self.with(|a| a.softmax_rows());
        self.unary(out, Op::SoftmaxRows(self.idx))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn grad_slot<'a>(
    grads: &'a mut [Option<Tensor>],
    values: &[Tensor],
    idx: usize,
) -> &'a mut [f64] {
    if grads[idx].is_none() {
        grads[idx] = Some(Tensor::zeros(values[idx].shape()));
    }
    grads[idx].as_mut().unwrap().data_mut()
}

fn backprop_op(op: &Op, out_idx: usize, g: &Tensor, values: &[Tensor], grads: &mut [Option<Tensor>]) {
    let gd = g.data();
    match op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            let ga = grad_slot(grads, values, *a);
            for (s, &gi) in ga.iter_mut().zip(gd) {
                *s += gi;
            }
            let gb = grad_slot(grads, values, *b);
            for (s, &gi) in gb.iter_mut().zip(gd) {
                *s += gi;
            }
        }
        Op::Sub(a, b) => {
            let ga = grad_slot(grads, values, *a);
            for (s, &gi) in ga.iter_mut().zip(gd) {
                *s += gi;
            }
            let gb = grad_slot(grads, values, *b);
            for (s, &gi) in gb.iter_mut().zip(gd) {
                *s -= gi;
            }
        }
        Op::Mul(a, b) => {
            {
                let vb = values[*b].data().to_vec();
                let ga = grad_slot(grads, values, *a);
                for i in 0..gd.len() {
                    ga[i] += gd[i] * vb[i];
                }
            }
            let va = values[*a].data().to_vec();
            let gb = grad_slot(grads, values, *b);
            for i in 0..gd.len() {
                gb[i] += gd[i] * va[i];
            }
        }
        Op::Div(a, b) => {
            let va = values[*a].data().to_vec();
            let vb = values[*b].data().to_vec();
            {
                let ga = grad_slot(grads, values, *a);
                for i in 0..gd.len() {
                    ga[i] += gd[i] / vb[i];
                }
            }
            let gb = grad_slot(grads, values, *b);
            for i in 0..gd.len() {
                gb[i] -= gd[i] * va[i] / (vb[i] * vb[i]);
            }
        }
        Op::Exp(a) => {
            let out = values[out_idx].data().to_vec();
            let ga = grad_slot(grads, values, *a);
            for i in 0..gd.len() {
                ga[i] += gd[i] * out[i];
            }
        }
        Op::Relu(a) => {
            let va = values[*a].data().to_vec();
            let ga = grad_slot(grads, values, *a);
            for i in 0..gd.len() {
                if va[i] > 0.0 {
                    ga[i] += gd[i];
                }
            }
        }
        Op::Softplus(a) => {
            let va = values[*a].data().to_vec();
            let ga = grad_slot(grads, values, *a);
            for i in 0..gd.len() {
                ga[i] += gd[i] * sigmoid(va[i]);
            }
        }
        Op::Sqrt(a) => {
            let out = values[out_idx].data().to_vec();
            let ga = grad_slot(grads, values, *a);
            for i in 0..gd.len() {
                if out[i] > 0.0 {
                    ga[i] += gd[i] / (2.0 * out[i]);
                }
            }
        }
        Op::ClampMin(a, floor) => {
            let va = values[*a].data().to_vec();
            let ga = grad_slot(grads, values, *a);
            for i in 0..gd.len() {
                if va[i] > *floor {
                    ga[i] += gd[i];
                }
            }
        }
        Op::Scale(a, c) => {
            let ga = grad_slot(grads, values, *a);
            for i in 0..gd.len() {
                ga[i] += gd[i] * c;
            }
        }
        Op::MulScalarNode(a, s) => {
            let sv = values[*s].item();
            let va = values[*a].data().to_vec();
            {
                let ga = grad_slot(grads, values, *a);
                for i in 0..gd.len() {
                    ga[i] += gd[i] * sv;
                }
            }
            let gs = grad_slot(grads, values, *s);
            gs[0] += gd.iter().zip(&va).map(|(gi, ai)| gi * ai).sum::<f64>();
        }
        Op::Matmul(a, b) => {
            let (m, k) = (values[*a].shape()[0], values[*a].shape()[1]);
            let n = values[*b].shape()[1];
            let va = values[*a].data().to_vec();
            let vb = values[*b].data().to_vec();
            {
                // dA = g · Bᵀ
                let ga = grad_slot(grads, values, *a);
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gd[i * n + j] * vb[p * n + j];
                        }
                        ga[i * k + p] += acc;
                    }
                }
            }
            // dB = Aᵀ · g
            let gb = grad_slot(grads, values, *b);
            for p in 0..k {
                for j in 0..n {
                    let mut acc = 0.0;
                    for i in 0..m {
                        acc += va[i * k + p] * gd[i * n + j];
                    }
                    gb[p * n + j] += acc;
                }
            }
        }
        Op::VecMat(v, w) => {
            let k = values[*v].shape()[0];
            let n = values[*w].shape()[1];
            let vv = values[*v].data().to_vec();
            let vw = values[*w].data().to_vec();
            {
                let gv = grad_slot(grads, values, *v);
                for i in 0..k {
                    let mut acc = 0.0;
                    for j in 0..n {
                        acc += gd[j] * vw[i * n + j];
                    }
                    gv[i] += acc;
                }
            }
            let gw = grad_slot(grads, values, *w);
            for i in 0..k {
                for j in 0..n {
                    gw[i * n + j] += vv[i] * gd[j];
                }
            }
        }
        Op::MatVec(m_idx, v_idx) => {
            let (r, c) = (values[*m_idx].shape()[0], values[*m_idx].shape()[1]);
            let vm = values[*m_idx].data().to_vec();
            let vv = values[*v_idx].data().to_vec();
            {
                let gm = grad_slot(grads, values, *m_idx);
                for i in 0..r {
                    for j in 0..c {
                        gm[i * c + j] += gd[i] * vv[j];
                    }
                }
            }
            let gv = grad_slot(grads, values, *v_idx);
            for j in 0..c {
                let mut acc = 0.0;
                for i in 0..r {
                    acc += gd[i] * vm[i * c + j];
                }
                gv[j] += acc;
            }
        }
        Op::Outer(a, b) => {
            let r = values[*a].shape()[0];
            let c = values[*b].shape()[0];
            let va = values[*a].data().to_vec();
            let vb = values[*b].data().to_vec();
            {
                let ga = grad_slot(grads, values, *a);
                for i in 0..r {
                    let mut acc = 0.0;
                    for j in 0..c {
                        acc += gd[i * c + j] * vb[j];
                    }
                    ga[i] += acc;
                }
            }
            let gb = grad_slot(grads, values, *b);
            for j in 0..c {
                let mut acc = 0.0;
                for i in 0..r {
                    acc += gd[i * c + j] * va[i];
                }
                gb[j] += acc;
            }
        }
        Op::Dot(a, b) => {
            let g0 = gd[0];
            let va = values[*a].data().to_vec();
            let vb = values[*b].data().to_vec();
            {
                let ga = grad_slot(grads, values, *a);
                for i in 0..vb.len() {
                    ga[i] += g0 * vb[i];
                }
            }
            let gb = grad_slot(grads, values, *b);
            for i in 0..va.len() {
                gb[i] += g0 * va[i];
            }
        }
        Op::MulRows(m_idx, v_idx) => {
            let (r, c) = (values[*m_idx].shape()[0], values[*m_idx].shape()[1]);
            let vm = values[*m_idx].data().to_vec();
            let vv = values[*v_idx].data().to_vec();
            {
                let gm = grad_slot(grads, values, *m_idx);
                for i in 0..r {
                    for j in 0..c {
                        gm[i * c + j] += gd[i * c + j] * vv[i];
                    }
                }
            }
            let gv = grad_slot(grads, values, *v_idx);
            for i in 0..r {
                let mut acc = 0.0;
                for j in 0..c {
                    acc += gd[i * c + j] * vm[i * c + j];
                }
                gv[i] += acc;
            }
        }
        Op::AddRowBroadcast(m_idx, b_idx) => {
            let (r, c) = (values[*m_idx].shape()[0], values[*m_idx].shape()[1]);
            {
                let gm = grad_slot(grads, values, *m_idx);
                for i in 0..gd.len() {
                    gm[i] += gd[i];
                }
            }
            let gb = grad_slot(grads, values, *b_idx);
            for j in 0..c {
                let mut acc = 0.0;
                for i in 0..r {
                    acc += gd[i * c + j];
                }
                gb[j] += acc;
            }
        }
        Op::Transpose(a) => {
            let (r, c) = (values[*a].shape()[0], values[*a].shape()[1]);
            let ga = grad_slot(grads, values, *a);
            // g has shape [c, r]
            for i in 0..r {
                for j in 0..c {
                    ga[i * c + j] += gd[j * r + i];
                }
            }
        }
        Op::Slice0(a, start, _end) => {
            let stride: usize = values[*a].shape()[1..].iter().product::<usize>().max(1);
            let ga = grad_slot(grads, values, *a);
            let off = start * stride;
            for i in 0..gd.len() {
                ga[off + i] += gd[i];
            }
        }
        Op::Concat0(parts) => {
            let mut off = 0;
            for &p in parts {
                let n = values[p].len();
                let gp = grad_slot(grads, values, p);
                for i in 0..n {
                    gp[i] += gd[off + i];
                }
                off += n;
            }
        }
        Op::StackRows(rows) => {
            for (i, &r) in rows.iter().enumerate() {
                let c = values[r].len();
                let gr = grad_slot(grads, values, r);
                for j in 0..c {
                    gr[j] += gd[i * c + j];
                }
            }
        }
        Op::SumAll(a) => {
            let g0 = gd[0];
            let ga = grad_slot(grads, values, *a);
            for s in ga.iter_mut() {
                *s += g0;
            }
        }
        Op::RmsNorm(a, eps) => {
            let x = values[*a].data().to_vec();
            let n = x.len() as f64;
            let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
            let r = 1.0 / (ms + eps).sqrt();
            let gdotx: f64 = gd.iter().zip(&x).map(|(gi, xi)| gi * xi).sum();
            let ga = grad_slot(grads, values, *a);
            let k = r * r * r / n * gdotx;
            for i in 0..x.len() {
                ga[i] += r * gd[i] - k * x[i];
            }
        }
        Op::SoftmaxRows(a) => {
            let s = values[out_idx].clone();
            let (r, c) = if s.shape().len() == 2 {
                (s.shape()[0], s.shape()[1])
            } else {
                (1, s.shape()[0])
            };
            let ga = grad_slot(grads, values, *a);
            for i in 0..r {
                let row = &s.data()[i * c..(i + 1) * c];
                let grow = &gd[i * c..(i + 1) * c];
                let dot: f64 = row.iter().zip(grow).map(|(si, gi)| si * gi).sum();
                for j in 0..c {
                    ga[i * c + j] += row[j] * (grow[j] - dot);
                }
            }
        }
        Op::CrossEntropy(logits_idx, targets) => {
            let g0 = gd[0];
            let l = values[*logits_idx].clone();
            let c = l.shape()[1];
            let count = targets.iter().flatten().count() as f64;
            let ga = grad_slot(grads, values, *logits_idx);
            for (i, t) in targets.iter().enumerate() {
                let Some(t) = t else { continue };
                let row = &l.data()[i * c..(i + 1) * c];
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                for j in 0..c {
                    let p = (row[j] - m).exp() / z;
                    let onehot = if j == *t { 1.0 } else { 0.0 };
                    ga[i * c + j] += g0 * (p - onehot) / count;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::gradcheck::{fd_check_loss, FD_STEP};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn backward_of_sum_is_ones() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![3], vec![1.0, -2.0, 5.0]));
        let loss = x.sum();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_square_is_two_x() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![1], vec![3.0]));
        let loss = x.mul(&x).unwrap();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&x).item(), 6.0);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::zeros(&[3]));
        assert!(tape.backward(&x).is_err());
    }

    #[test]
    fn unreached_leaf_gets_zero_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(vec![2], vec![1.0, 2.0]));
        let unused = tape.leaf(Tensor::from_vec(vec![2], vec![5.0, 6.0]));
        let loss = x.sum();
        tape.backward(&loss).unwrap();
        assert_eq!(tape.grad(&unused).data(), &[0.0, 0.0]);
    }

    #[test]
    fn grad_hook_scales_upstream_flow() {
        // loss = 3 * mid, mid = 2 * x; hook 0.5 on mid halves dloss/dx
        // but leaves dloss/dmid itself as accumulated.
        let build = |hook: Option<f64>| {
            let tape = Tape::new();
            let x = tape.leaf(Tensor::scalar(4.0));
            let mid = x.scale(2.0);
            let loss = mid.scale(3.0);
            if let Some(f) = hook {
                tape.scale_grad(&mid, f);
            }
            tape.backward(&loss).unwrap();
            tape.grad(&x).item()
        };
        assert_eq!(build(None), 6.0);
        assert_eq!(build(Some(0.5)), 3.0);
        assert_eq!(build(Some(0.0)), 0.0);
    }

    /// Central finite differences across every primitive, 10 seeds.
    #[test]
    fn primitives_match_finite_differences() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let mut b = (0..12).map(|_| rng.gen_range(0.5..1.5)).collect::<Vec<f64>>();
            let mut m = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let mut v = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
            let mut s = vec![rng.gen_range(0.5..1.5)];

            // a composite touching every op once; result scalar
            let f = |a: &[f64], b: &[f64], m: &[f64], v: &[f64], s: &[f64]| -> (Tape, Value, Value, Value, Value, Value, Value) {
                let tape = Tape::new();
                let av = tape.leaf(Tensor::from_vec(vec![3, 4], a.to_vec()));
                let bv = tape.leaf(Tensor::from_vec(vec![3, 4], b.to_vec()));
                let mv = tape.leaf(Tensor::from_vec(vec![4, 3], m.to_vec()));
                let vv = tape.leaf(Tensor::from_vec(vec![4], v.to_vec()));
                let sv = tape.leaf(Tensor::from_vec(vec![1], s.to_vec()));

                let sum1 = av.add(&bv).unwrap().mul(&bv).unwrap().sub(&av).unwrap();
                let prod = sum1.matmul(&mv).unwrap(); // 3x3
                let prod_t = prod.transpose().unwrap();
                let both = prod.add(&prod_t).unwrap();
                let row = both.row(1).unwrap(); // [3]
                let vm = row.vecmat(&mv.transpose().unwrap()).unwrap(); // [4]
                let mv2 = av.matvec(&vv).unwrap(); // [3]
                let outer = mv2.outer(&vm).unwrap(); // 3x4
                let scaled = outer.mul_rows(&mv2).unwrap();
                let biased = scaled.add_row_broadcast(&vv).unwrap();
                let act = biased
                    .relu()
                    .add(&biased.softplus())
                    .unwrap()
                    .add(&biased.scale(0.3).exp())
                    .unwrap();
                let normed = act.row(0).unwrap().rms_norm(1e-6);
                let smax = act.softmax_rows();
                let d = normed.dot(&vm).unwrap();
                let q = d.mul_scalar(&sv).unwrap();
                let denom = vm
                    .dot(&vm)
                    .unwrap()
                    .sqrt()
                    .clamp_min(1e-8)
                    .add(&tape.scalar(1.0))
                    .unwrap();
                let frac = q.div(&denom).unwrap();
                let cat = tape
                    .concat0(&[smax.slice0(0, 2).unwrap(), smax.slice0(2, 3).unwrap()])
                    .unwrap();
                let stacked = tape.stack_rows(&[normed.clone(), normed]).unwrap();
                let ce = tape
                    .cross_entropy(&cat, &[Some(1), None, Some(0)])
                    .unwrap();
                let loss = cat
                    .sum()
                    .add(&frac)
                    .unwrap()
                    .add(&stacked.sum())
                    .unwrap()
                    .add(&ce)
                    .unwrap();
                (tape, loss, av, bv, mv, vv, sv)
            };

            let (tape, loss, av, bv, mv, vv, sv) = f(&a, &b, &m, &v, &s);
            tape.backward(&loss).unwrap();
            let grads = [
                tape.grad(&av),
                tape.grad(&bv),
                tape.grad(&mv),
                tape.grad(&vv),
                tape.grad(&sv),
            ];

            let bufs: Vec<&mut Vec<f64>> = vec![&mut a, &mut b, &mut m, &mut v, &mut s];
            let max_err = fd_check_loss(
                bufs,
                &grads,
                FD_STEP,
                |bufs| {
                    let (_, loss, ..) = f(bufs[0], bufs[1], bufs[2], bufs[3], bufs[4]);
                    loss.item()
                },
            );
            assert!(
                max_err < 1e-5,
                "seed {seed}: primitive gradient mismatch, rel err {max_err:e}"
            );
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_log_vocab() {
        let tape = Tape::new();
        let logits = tape.leaf(Tensor::zeros(&[2, 16]));
        let loss = tape.cross_entropy(&logits, &[Some(3), Some(11)]).unwrap();
        assert!((loss.item() - (16.0f64).ln()).abs() < 1e-12);
    }
}
