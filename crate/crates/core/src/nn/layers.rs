use rand::Rng;

use super::params::{ParamId, ParamStore};
use super::tape::{Activation, Tape, Var};
use super::Tensor;
use crate::error::{shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub activation: Activation,
}

/// Stack of affine layers, each followed by its own activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [in, h1, ..., out]`; hidden layers use `hidden`, the last uses `last`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        widths: &[usize],
        hidden: Activation,
        last: Activation,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if widths.len() < 2 {
            return Err(shape_err("Mlp::new", format!("{name}: need at least input and output width")));
        }
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|k| Linear {
                weight: store.add_glorot(format!("{name}.{k}.weight"), widths[k], widths[k + 1], rng),
                bias: store.add(format!("{name}.{k}.bias"), Tensor::zeros(1, widths[k + 1])),
                activation: if k + 1 == n { last } else { hidden },
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn input_width(&self, store: &ParamStore) -> usize {
        store.get(self.layers[0].weight).rows()
    }

    pub fn output_width(&self, store: &ParamStore) -> usize {
        store.get(self.layers[self.layers.len() - 1].weight).cols()
    }

    pub fn trace(&self, store: &ParamStore, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for layer in &self.layers {
            let w = tape.param(store, layer.weight)?;
            let b = tape.param(store, layer.bias)?;
            let z = tape.matmul(h, w)?;
            let z = tape.add_row(z, b)?;
            h = tape.act(z, layer.activation)?;
        }
        Ok(h)
    }
}

/// Evaluates `m` on `x`, recording on `tape` when one is given.
pub fn mlp_forward(m: &Mlp, store: &ParamStore, x: &Tensor, tape: Option<&mut Tape>) -> Result<Tensor> {
    let mut local = Tape::new();
    let tape = tape.unwrap_or(&mut local);
    let xv = tape.constant(x.clone())?;
    let out = m.trace(store, tape, xv)?;
    Ok(tape.value(out).clone())
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MhaParams {
    pub heads: Vec<AttentionHead>,
    pub output: ParamId,
    pub key_width: usize,
}

impl MhaParams {
    /// Projections `d_in -> key_width` per head and `head_count * key_width -> d_out`.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        key_width: usize,
        head_count: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if head_count == 0 || key_width == 0 {
            return Err(shape_err("MhaParams::new", format!("{name}: zero heads or key width")));
        }
        let heads = (0..head_count)
            .map(|u| AttentionHead {
                query: store.add_glorot(format!("{name}.head{u}.query"), d_in, key_width, rng),
                key: store.add_glorot(format!("{name}.head{u}.key"), d_in, key_width, rng),
                value: store.add_glorot(format!("{name}.head{u}.value"), d_in, key_width, rng),
            })
            .collect();
        let output = store.add_glorot(format!("{name}.output"), head_count * key_width, d_out, rng);
        Ok(Self { heads, output, key_width })
    }

    /// Attention over `groups` independent blocks: block `g` of `q` (rows
    /// `g*m..(g+1)*m`) attends over block `g` of `k` and `v`.
    pub fn trace_grouped(&self, store: &ParamStore, tape: &mut Tape, q: Var, k: Var, v: Var, groups: usize) -> Result<Var> {
        if tape.value(k).rows() != tape.value(v).rows() {
            return Err(shape_err(
                "multihead_attention",
                format!("{} key rows vs {} value rows", tape.value(k).rows(), tape.value(v).rows()),
            ));
        }
        let scale = 1.0 / (self.key_width as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads.len());
        for head in &self.heads {
            let wq = tape.param(store, head.query)?;
            let wk = tape.param(store, head.key)?;
            let wv = tape.param(store, head.value)?;
            let qh = tape.matmul(q, wq)?;
            let kh = tape.matmul(k, wk)?;
            let vh = tape.matmul(v, wv)?;
            let logits = tape.grouped_matmul_t(qh, kh, groups)?;
            let logits = tape.scale(logits, scale)?;
            let weights = tape.softmax_rows(logits)?;
            outs.push(tape.grouped_matmul(weights, vh, groups)?);
        }
        let cat = tape.concat_cols(&outs)?;
        let wo = tape.param(store, self.output)?;
        tape.matmul(cat, wo)
    }
}

/// Single-block multi-head attention of `q` over `k`/`v`.
pub fn multihead_attention(
    p: &MhaParams,
    store: &ParamStore,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    tape: Option<&mut Tape>,
) -> Result<Tensor> {
    let mut local = Tape::new();
    let tape = tape.unwrap_or(&mut local);
    let (qv, kv, vv) = (tape.constant(q.clone())?, tape.constant(k.clone())?, tape.constant(v.clone())?);
    let out = p.trace_grouped(store, tape, qv, kv, vv, 1)?;
    Ok(tape.value(out).clone())
}
