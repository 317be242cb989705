//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! Every op appends its output value and a record of its inputs. `backward`
//! walks the records once in reverse order, which is a valid reverse
//! topological order because inputs always precede outputs.

use std::collections::HashMap;

use super::params::{Gradients, ParamId, ParamStore};
use super::tensor::dot;
use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Identity,
    Relu,
    LeakyRelu(f64),
    Sigmoid,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Identity => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu(s) => {
                if x > 0.0 {
                    x
                } else {
                    s * x
                }
            }
            Activation::Sigmoid => sigmoid(x),
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Probability floor inside the log terms of the BCE.
pub const BCE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Act(Var, Activation),
    Concat(Vec<Var>),
    Gather(Var, Vec<usize>),
    ScatterAdd(Var, Vec<usize>),
    SoftmaxRows(Var),
    SegmentSoftmax(Var, Vec<usize>, usize),
    MulCol(Var, Var),
    GroupedMatMulT(Var, Var, usize),
    GroupedMatMul(Var, Var, usize),
    Scale(Var, f64),
    Reshape(Var),
    WeightedBce { p: Var, y: Vec<f64>, w: Vec<f64> },
    Sum(Var),
}

#[derive(Debug, Default)]
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    params: HashMap<ParamId, Var>,
    kinks: u64,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Hash of the branch taken at every non-differentiable point seen so
    /// far (ReLU-family signs, BCE clamps). Two evaluations with equal
    /// signatures took the same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        self.kinks
    }

    fn note_kink(&mut self, bit: bool) {
        self.kinks = (self.kinks ^ u64::from(bit)).wrapping_mul(0x0100_0000_01b3).rotate_left(5);
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        self.values.push(value);
        self.ops.push(op);
        Ok(Var(self.values.len() - 1))
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, "constant")
    }

    /// Records a parameter once; later calls return the same handle so
    /// gradients from every use accumulate.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, "param")?;
        self.params.insert(id, v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push(out, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b))?;
        self.push(out, Op::Add(a, b), "add")
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ta, tr) = (self.value(a), self.value(row));
        if tr.rows() != 1 || tr.cols() != ta.cols() {
            return Err(shape_err("add_row", format!("{:?} plus row {:?}", ta.shape(), tr.shape())));
        }
        let mut out = ta.clone();
        let n = out.cols();
        if n > 0 {
            for r in out.data_mut().chunks_mut(n) {
                for (o, b) in r.iter_mut().zip(tr.data()) {
                    *o += b;
                }
            }
        }
        self.push(out, Op::AddRow(a, row), "add_row")
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Result<Var> {
        if let Activation::Identity = f {
            return Ok(a);
        }
        if matches!(f, Activation::Relu | Activation::LeakyRelu(_)) {
            let bits: Vec<bool> = self.value(a).data().iter().map(|&x| x > 0.0).collect();
            for b in bits {
                self.note_kink(b);
            }
        }
        let out = self.value(a).map(|x| f.apply(x));
        self.push(out, Op::Act(a, f), "activation")
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(shape_err("concat_cols", "no inputs"));
        };
        let rows = self.value(*first).rows();
        if let Some(bad) = parts.iter().find(|p| self.value(**p).rows() != rows) {
            return Err(shape_err("concat_cols", format!("row count {} vs {rows}", self.value(*bad).rows())));
        }
        let cols: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        self.push(out, Op::Concat(parts.to_vec()), "concat")
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if let Some(bad) = idx.iter().find(|&&i| i >= ta.rows()) {
            return Err(shape_err("gather_rows", format!("row {bad} of {}", ta.rows())));
        }
        let cols = ta.cols();
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(ta.row(i));
        }
        let out = Tensor::new(idx.len(), cols, data)?;
        self.push(out, Op::Gather(a, idx.to_vec()), "gather_rows")
    }

    /// Sums row `k` of `a` into output row `idx[k]`; the output has `n` rows.
    pub fn scatter_add_rows(&mut self, a: Var, idx: &[usize], n: usize) -> Result<Var> {
        let ta = self.value(a);
        if idx.len() != ta.rows() || idx.iter().any(|&i| i >= n) {
            return Err(shape_err("scatter_add_rows", format!("{} indices for {} rows into {n}", idx.len(), ta.rows())));
        }
        let mut out = Tensor::zeros(n, ta.cols());
        for (k, &i) in idx.iter().enumerate() {
            for (o, v) in out.row_mut(i).iter_mut().zip(ta.row(k)) {
                *o += v;
            }
        }
        self.push(out, Op::ScatterAdd(a, idx.to_vec()), "scatter_add_rows")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a), "softmax_rows")
    }

    /// Softmax of a column vector within segments: entries sharing
    /// `seg[k]` are normalized together.
    pub fn segment_softmax(&mut self, a: Var, seg: &[usize], nseg: usize) -> Result<Var> {
        let ta = self.value(a);
        if ta.cols() != 1 || ta.rows() != seg.len() || seg.iter().any(|&s| s >= nseg) {
            return Err(shape_err("segment_softmax", format!("{:?} with {} segment ids", ta.shape(), seg.len())));
        }
        let x = ta.data();
        let mut mx = vec![f64::NEG_INFINITY; nseg];
        for (k, &s) in seg.iter().enumerate() {
            mx[s] = mx[s].max(x[k]);
        }
        let e: Vec<f64> = seg.iter().enumerate().map(|(k, &s)| (x[k] - mx[s]).exp()).collect();
        let mut tot = vec![0.0; nseg];
        for (k, &s) in seg.iter().enumerate() {
            tot[s] += e[k];
        }
        let y: Vec<f64> = seg.iter().enumerate().map(|(k, &s)| e[k] / tot[s]).collect();
        let out = Tensor::column(y);
        self.push(out, Op::SegmentSoftmax(a, seg.to_vec(), nseg), "segment_softmax")
    }

    /// Scales row `r` of `a` by `c[r]` where `c` is a column vector.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(c));
        if tc.cols() != 1 || tc.rows() != ta.rows() {
            return Err(shape_err("mul_col", format!("{:?} by {:?}", ta.shape(), tc.shape())));
        }
        let mut out = ta.clone();
        for r in 0..out.rows() {
            let s = tc.data()[r];
            out.row_mut(r).iter_mut().for_each(|v| *v *= s);
        }
        self.push(out, Op::MulCol(a, c), "mul_col")
    }

    /// Block-wise `A_g B_g^T` for `groups` consecutive row blocks.
    pub fn grouped_matmul_t(&mut self, a: Var, b: Var, groups: usize) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, n) = group_dims("grouped_matmul_t", ta, tb, groups)?;
        if ta.cols() != tb.cols() {
            return Err(shape_err("grouped_matmul_t", format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let mut out = Tensor::zeros(groups * m, n);
        for g in 0..groups {
            for r in 0..m {
                let arow = ta.row(g * m + r);
                for c in 0..n {
                    out.set(g * m + r, c, dot(arow, tb.row(g * n + c)));
                }
            }
        }
        self.push(out, Op::GroupedMatMulT(a, b, groups), "grouped_matmul_t")
    }

    /// Block-wise `P_g V_g` where `P_g` is `m x n` and `V_g` is `n x d`.
    pub fn grouped_matmul(&mut self, p: Var, v: Var, groups: usize) -> Result<Var> {
        let (tp, tv) = (self.value(p), self.value(v));
        let (m, n) = group_dims("grouped_matmul", tp, tv, groups)?;
        if tp.cols() != n {
            return Err(shape_err("grouped_matmul", format!("{:?} vs {:?}", tp.shape(), tv.shape())));
        }
        let d = tv.cols();
        let mut out = Tensor::zeros(groups * m, d);
        for g in 0..groups {
            for r in 0..m {
                let prow = tp.row(g * m + r).to_vec();
                let orow = out.row_mut(g * m + r);
                for (c, &w) in prow.iter().enumerate() {
                    for (o, x) in orow.iter_mut().zip(tv.row(g * n + c)) {
                        *o += w * x;
                    }
                }
            }
        }
        self.push(out, Op::GroupedMatMul(p, v, groups), "grouped_matmul")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), "scale")
    }

    /// Row-major reinterpretation.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshaped(rows, cols)?;
        self.push(out, Op::Reshape(a), "reshape")
    }

    /// `(1/|E|) Σ w_k BCE(p_k, y_k)` with both log arguments clamped at
    /// [`BCE_CLAMP`]; an empty input gives 0.
    pub fn weighted_bce(&mut self, p: Var, y: &[f64], w: &[f64]) -> Result<Var> {
        let tp = self.value(p);
        if tp.cols() != 1 || tp.rows() != y.len() || y.len() != w.len() {
            return Err(shape_err("weighted_bce", format!("{:?} with {} labels, {} weights", tp.shape(), y.len(), w.len())));
        }
        let probs = tp.data().to_vec();
        let n = probs.len();
        let mut total = 0.0;
        for k in 0..n {
            let (pk, yk) = (probs[k], y[k]);
            self.note_kink(pk > BCE_CLAMP);
            self.note_kink(1.0 - pk > BCE_CLAMP);
            total += w[k] * -(yk * pk.max(BCE_CLAMP).ln() + (1.0 - yk) * (1.0 - pk).max(BCE_CLAMP).ln());
        }
        let loss = if n == 0 { 0.0 } else { total / n as f64 };
        self.push(
            Tensor::scalar(loss),
            Op::WeightedBce {
                p,
                y: y.to_vec(),
                w: w.to_vec(),
            },
            "weighted_bce",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    /// Gradients of the scalar `loss` with respect to every parameter of
    /// `store`; parameters not used on this tape get zeros.
    pub fn backward(&self, loss: Var, store: &ParamStore) -> Result<Gradients> {
        self.backward_seeded(loss, store, 1.0)
    }

    pub fn backward_seeded(&self, loss: Var, store: &ParamStore, seed: f64) -> Result<Gradients> {
        if self.values.is_empty() {
            return Err(Error::State("backward called before any forward op was recorded".into()));
        }
        if loss.0 >= self.values.len() || self.values[loss.0].shape() != (1, 1) {
            return Err(Error::State("backward needs a recorded scalar loss".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.values.len()];
        grads[loss.0] = Some(Tensor::scalar(seed));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_op(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut out = store.zeros_like();
        let mut per_param = Vec::with_capacity(store.len());
        for id in store.ids() {
            let g = self
                .params
                .get(&id)
                .and_then(|v| grads[v.0].clone())
                .unwrap_or_else(|| out.get(id).clone());
            per_param.push(g);
        }
        out = Gradients::from_vec(per_param);
        Ok(out)
    }

    fn backprop_op(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor>], v: Var, t: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&t),
                slot @ None => {
                    *slot = Some(t);
                    Ok(())
                }
            }
        };
        match &self.ops[idx] {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let da = g.matmul_t(self.value(*b))?;
                let db = self.value(*a).t_matmul(g)?;
                acc(grads, *a, da)?;
                acc(grads, *b, db)?;
            }
            Op::Add(a, b) => {
                acc(grads, *a, g.clone())?;
                acc(grads, *b, g.clone())?;
            }
            Op::AddRow(a, r) => {
                let n = g.cols();
                let mut dr = vec![0.0; n];
                for row in 0..g.rows() {
                    for (d, v) in dr.iter_mut().zip(g.row(row)) {
                        *d += v;
                    }
                }
                acc(grads, *a, g.clone())?;
                acc(grads, *r, Tensor::row_vector(dr))?;
            }
            Op::Act(a, f) => {
                let x = self.value(*a);
                let y = &self.values[idx];
                let mut d = g.clone();
                for (k, dv) in d.data_mut().iter_mut().enumerate() {
                    let deriv = match f {
                        Activation::Identity => 1.0,
                        Activation::Relu => {
                            if x.data()[k] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Activation::LeakyRelu(s) => {
                            if x.data()[k] > 0.0 {
                                1.0
                            } else {
                                *s
                            }
                        }
                        Activation::Sigmoid => {
                            let s = y.data()[k];
                            s * (1.0 - s)
                        }
                    };
                    *dv *= deriv;
                }
                acc(grads, *a, d)?;
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for p in parts {
                    let c = self.value(*p).cols();
                    let mut d = Tensor::zeros(g.rows(), c);
                    for r in 0..g.rows() {
                        d.row_mut(r).copy_from_slice(&g.row(r)[offset..offset + c]);
                    }
                    offset += c;
                    acc(grads, *p, d)?;
                }
            }
            Op::Gather(a, ix) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                for (k, &i) in ix.iter().enumerate() {
                    for (o, v) in d.row_mut(i).iter_mut().zip(g.row(k)) {
                        *o += v;
                    }
                }
                acc(grads, *a, d)?;
            }
            Op::ScatterAdd(a, ix) => {
                let ta = self.value(*a);
                let mut d = Tensor::zeros(ta.rows(), ta.cols());
                for (k, &i) in ix.iter().enumerate() {
                    d.row_mut(k).copy_from_slice(g.row(i));
                }
                acc(grads, *a, d)?;
            }
            Op::SoftmaxRows(a) => {
                let y = &self.values[idx];
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let inner = dot(yr, gr);
                    for (c, o) in d.row_mut(r).iter_mut().enumerate() {
                        *o = yr[c] * (gr[c] - inner);
                    }
                }
                acc(grads, *a, d)?;
            }
            Op::SegmentSoftmax(a, seg, nseg) => {
                let y = self.values[idx].data();
                let gd = g.data();
                let mut inner = vec![0.0; *nseg];
                for (k, &s) in seg.iter().enumerate() {
                    inner[s] += y[k] * gd[k];
                }
                let d: Vec<f64> = seg.iter().enumerate().map(|(k, &s)| y[k] * (gd[k] - inner[s])).collect();
                acc(grads, *a, Tensor::column(d))?;
            }
            Op::MulCol(a, c) => {
                let (ta, tc) = (self.value(*a), self.value(*c));
                let mut da = g.clone();
                let mut dc = vec![0.0; tc.rows()];
                for r in 0..ta.rows() {
                    let s = tc.data()[r];
                    dc[r] = dot(g.row(r), ta.row(r));
                    da.row_mut(r).iter_mut().for_each(|v| *v *= s);
                }
                acc(grads, *a, da)?;
                acc(grads, *c, Tensor::column(dc))?;
            }
            Op::GroupedMatMulT(a, b, groups) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                // Zero groups only occur with empty operands.
                let m = ta.rows().checked_div(*groups).unwrap_or(0);
                let n = tb.rows().checked_div(*groups).unwrap_or(0);
                let mut da = Tensor::zeros(ta.rows(), ta.cols());
                let mut db = Tensor::zeros(tb.rows(), tb.cols());
                for gi in 0..*groups {
                    for r in 0..m {
                        for c in 0..n {
                            let w = g.get(gi * m + r, c);
                            if w == 0.0 {
                                continue;
                            }
                            let (ar, br) = (gi * m + r, gi * n + c);
                            for (o, v) in da.row_mut(ar).iter_mut().zip(tb.row(br)) {
                                *o += w * v;
                            }
                            for (o, v) in db.row_mut(br).iter_mut().zip(ta.row(ar)) {
                                *o += w * v;
                            }
                        }
                    }
                }
                acc(grads, *a, da)?;
                acc(grads, *b, db)?;
            }
            Op::GroupedMatMul(p, v, groups) => {
                let (tp, tv) = (self.value(*p), self.value(*v));
                let m = tp.rows().checked_div(*groups).unwrap_or(0);
                let n = tv.rows().checked_div(*groups).unwrap_or(0);
                let mut dp = Tensor::zeros(tp.rows(), tp.cols());
                let mut dv = Tensor::zeros(tv.rows(), tv.cols());
                for gi in 0..*groups {
                    for r in 0..m {
                        let pr = gi * m + r;
                        let grow = g.row(pr);
                        for c in 0..n {
                            let vr = gi * n + c;
                            dp.set(pr, c, dot(grow, tv.row(vr)));
                            let w = tp.get(pr, c);
                            for (o, x) in dv.row_mut(vr).iter_mut().zip(grow) {
                                *o += w * x;
                            }
                        }
                    }
                }
                acc(grads, *p, dp)?;
                acc(grads, *v, dv)?;
            }
            Op::Scale(a, c) => {
                acc(grads, *a, g.map(|x| x * c))?;
            }
            Op::Reshape(a) => {
                let ta = self.value(*a);
                acc(grads, *a, g.clone().reshaped(ta.rows(), ta.cols())?)?;
            }
            Op::WeightedBce { p, y, w } => {
                let probs = self.value(*p).data();
                let n = probs.len();
                let seed = g.data()[0];
                let d: Vec<f64> = (0..n)
                    .map(|k| {
                        let pk = probs[k];
                        let mut dd = 0.0;
                        if pk > BCE_CLAMP {
                            dd -= y[k] / pk;
                        }
                        if 1.0 - pk > BCE_CLAMP {
                            dd += (1.0 - y[k]) / (1.0 - pk);
                        }
                        seed * w[k] * dd / n as f64
                    })
                    .collect();
                acc(grads, *p, Tensor::column(d))?;
            }
            Op::Sum(a) => {
                let ta = self.value(*a);
                acc(grads, *a, Tensor::filled(ta.rows(), ta.cols(), g.data()[0]))?;
            }
        }
        Ok(())
    }
}

fn group_dims(op: &'static str, a: &Tensor, b: &Tensor, groups: usize) -> Result<(usize, usize)> {
    if groups == 0 {
        if a.rows() == 0 && b.rows() == 0 {
            return Ok((0, 0));
        }
        return Err(shape_err(op, "zero groups"));
    }
    if !a.rows().is_multiple_of(groups) || !b.rows().is_multiple_of(groups) {
        return Err(shape_err(op, format!("{} / {} rows not divisible into {groups} groups", a.rows(), b.rows())));
    }
    Ok((a.rows() / groups, b.rows() / groups))
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let mut out = x.clone();
    let n = out.cols();
    if n == 0 {
        return out;
    }
    for r in out.data_mut().chunks_mut(n) {
        let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut s = 0.0;
        for v in r.iter_mut() {
            *v = (*v - m).exp();
            s += *v;
        }
        for v in r.iter_mut() {
            *v /= s;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let z = softmax_rows(&Tensor::zeros(1, 4));
        assert!(z.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        let big = softmax_rows(&Tensor::row_vector(vec![1000.0, 0.0]));
        assert!(big.is_finite());
        assert!((big.data()[0] - 1.0).abs() < 1e-15 && big.data()[1] < 1e-300);
        let l = softmax_rows(&Tensor::row_vector(vec![1f64.ln(), 2f64.ln(), 3f64.ln()]));
        for (a, b) in l.data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_before_forward() {
        let tape = Tape::new();
        let store = ParamStore::new();
        assert!(matches!(tape.backward(Var(0), &store), Err(Error::State(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::zeros(2, 2)).unwrap();
        assert!(matches!(tape.backward(v, &ParamStore::new()), Err(Error::State(_))));
    }

    #[test]
    fn unused_param_gets_zero_gradient() {
        let mut store = ParamStore::new();
        let used = store.add("used", Tensor::filled(1, 1, 2.0));
        let unused = store.add("unused", Tensor::filled(2, 3, 1.0));
        let mut tape = Tape::new();
        let u = tape.param(&store, used).unwrap();
        let loss = tape.sum(u).unwrap();
        let g = tape.backward(loss, &store).unwrap();
        assert_eq!(g.get(used).data(), &[1.0]);
        assert_eq!(g.get(unused), &Tensor::zeros(2, 3));
    }

    #[test]
    fn non_finite_is_an_error() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(1e300)).unwrap();
        let b = tape.constant(Tensor::scalar(1e300)).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(Error::NonFinite(_))));
    }

    #[test]
    fn bce_of_perfect_scores_is_near_zero() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::column(vec![1.0, 0.0, 1.0 - 1e-13])).unwrap();
        let l = tape.weighted_bce(p, &[1.0, 0.0, 1.0], &[1.0, 1.0, 1.0]).unwrap();
        assert!(tape.value(l).data()[0] < 1e-12);
        let e = tape.constant(Tensor::zeros(0, 1)).unwrap();
        let l = tape.weighted_bce(e, &[], &[]).unwrap();
        assert_eq!(tape.value(l).data()[0], 0.0);
    }
}
