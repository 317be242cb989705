use std::f64::consts::PI;

use super::model::{Fusion, ModelParams};
use crate::error::{shape_err, Result};
use crate::features::{Detection3D, EDGE_DIM, NODE_BASE_DIM};
use crate::graph::{FrameKnnGraph, TrackingGraph};
use crate::nn::{Activation, Tape, Tensor, Var};

const POSITION_SCALE: f64 = 50.0;
const SIZE_SCALE: f64 = 5.0;
const VELOCITY_SCALE: f64 = 10.0;
const TIME_SCALE: f64 = 2.0;
const EDGE_SCALE: [f64; EDGE_DIM] = [10.0, 5.0, PI, 1.0, TIME_SCALE];

/// Node input row: the pose-and-motion vector brought to unit scale, then
/// stacked embeddings when the fusion mode asks for them.
fn node_input(params: &ModelParams, feature: &[f64], det: &Detection3D) -> Result<Vec<f64>> {
    let c = params.config.num_classes;
    let mut row: Vec<f64> = feature.to_vec();
    for v in &mut row[0..3] {
        *v /= POSITION_SCALE;
    }
    for v in &mut row[3..6] {
        *v /= SIZE_SCALE;
    }
    row[6] /= PI;
    row[7] /= VELOCITY_SCALE;
    row[8] /= VELOCITY_SCALE;
    row[NODE_BASE_DIM + c - 1] /= TIME_SCALE;
    if params.config.fusion == Fusion::NodeStack {
        for m in &params.config.modalities {
            match det.embedding(m.tag) {
                Some(v) => {
                    check_width(m.tag.as_str(), v.len(), m.dim)?;
                    row.extend_from_slice(v);
                    row.push(1.0);
                }
                None => {
                    row.extend(std::iter::repeat_n(0.0, m.dim));
                    row.push(0.0);
                }
            }
        }
    }
    Ok(row)
}

fn check_width(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(shape_err("modality embedding", format!("{what} has width {got}, expected {want}")));
    }
    Ok(())
}

/// Per-modality embedding matrix with a 1 in `absent` where the row has no
/// present vector.
#[derive(Debug, Clone)]
pub struct ModalityInputs {
    pub values: Tensor,
    pub absent: Tensor,
}

/// Constant tensors and index lists derived from one window.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub nodes: Tensor,
    pub edges: Tensor,
    pub src: Vec<usize>,
    pub dst: Vec<usize>,
    pub modalities: Vec<ModalityInputs>,
    /// Frame-wise attention pairs `(target, source)`, each node paired with
    /// itself first.
    pub gat_target: Vec<usize>,
    pub gat_source: Vec<usize>,
}

impl GraphInputs {
    pub fn new(graph: &TrackingGraph, frame_knn: &FrameKnnGraph, params: &ModelParams) -> Result<Self> {
        let n = graph.nodes.len();
        if frame_knn.neighbors.len() != n {
            return Err(shape_err("forward", format!("frame kNN covers {} nodes, graph has {n}", frame_knn.neighbors.len())));
        }
        let width = params.config.node_input_dim();
        let rows = graph
            .nodes
            .iter()
            .map(|node| node_input(params, &node.feature.0, &node.det))
            .collect::<Result<Vec<_>>>()?;
        let nodes = Tensor::from_rows(&rows, width)?;
        let edge_rows: Vec<Vec<f64>> = graph
            .edges
            .iter()
            .map(|e| e.feature.0.iter().zip(EDGE_SCALE).map(|(v, s)| v / s).collect())
            .collect();
        let edges = Tensor::from_rows(&edge_rows, EDGE_DIM)?;
        let mut modalities = Vec::new();
        for att in &params.attention {
            let dim = att.spec.dim;
            let mut values = Tensor::zeros(n, dim);
            let mut absent = Tensor::zeros(n, 1);
            for (k, node) in graph.nodes.iter().enumerate() {
                match node.det.embedding(att.spec.tag) {
                    Some(v) => {
                        check_width(att.spec.tag.as_str(), v.len(), dim)?;
                        values.row_mut(k).copy_from_slice(v);
                    }
                    None => absent.set(k, 0, 1.0),
                }
            }
            modalities.push(ModalityInputs { values, absent });
        }
        let mut gat_target = Vec::new();
        let mut gat_source = Vec::new();
        for (j, nb) in frame_knn.neighbors.iter().enumerate() {
            gat_target.push(j);
            gat_source.push(j);
            for &i in nb {
                if i >= n || i == j {
                    return Err(shape_err("forward", format!("bad frame neighbor {i} of node {j}")));
                }
                gat_target.push(j);
                gat_source.push(i);
            }
        }
        Ok(Self {
            nodes,
            edges,
            src: graph.edges.iter().map(|e| e.src).collect(),
            dst: graph.edges.iter().map(|e| e.dst).collect(),
            modalities,
            gat_target,
            gat_source,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.rows()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.rows()
    }
}

/// Embeddings carried through message passing.
#[derive(Debug, Clone, Copy)]
pub struct MpState {
    pub nodes: Var,
    pub edges: Var,
    pub initial_nodes: Var,
    /// Attention-weighted modality edge feature, fixed across steps.
    pub attended: Option<Var>,
}

pub fn encode_initial(tape: &mut Tape, params: &ModelParams, inputs: &GraphInputs) -> Result<MpState> {
    let x = tape.constant(inputs.nodes.clone())?;
    let e = tape.constant(inputs.edges.clone())?;
    let nodes = params.node_encoder.trace(&params.store, tape, x)?;
    let edges = params.edge_encoder.trace(&params.store, tape, e)?;
    Ok(MpState {
        nodes,
        edges,
        initial_nodes: nodes,
        attended: None,
    })
}

/// Both directed attentions per modality, concatenated with the raw edge
/// feature and encoded to the hidden width.
pub fn cross_edge_modality_attention(tape: &mut Tape, params: &ModelParams, inputs: &GraphInputs) -> Result<Var> {
    let e = inputs.num_edges();
    let n = inputs.num_nodes();
    let tokens = params.config.modality_tokens;
    let store = &params.store;
    let mut toward_dst = Vec::new();
    let mut toward_src = Vec::new();
    for (att, mi) in params.attention.iter().zip(&inputs.modalities) {
        let dim = att.spec.dim;
        let tw = dim / tokens;
        let present = tape.constant(mi.values.clone())?;
        let mask = tape.constant(mi.absent.clone())?;
        let token = tape.param(store, att.absent_token)?;
        let spread = tape.gather_rows(token, &vec![0; n])?;
        let fill = tape.mul_col(spread, mask)?;
        let emb = tape.add(present, fill)?;
        let emb_tokens = tape.reshape(emb, n * tokens, tw)?;
        let dst_idx: Vec<usize> = inputs.dst.iter().flat_map(|&i| (0..tokens).map(move |t| i * tokens + t)).collect();
        let src_idx: Vec<usize> = inputs.src.iter().flat_map(|&j| (0..tokens).map(move |t| j * tokens + t)).collect();
        let at_dst = tape.gather_rows(emb_tokens, &dst_idx)?;
        let at_src = tape.gather_rows(emb_tokens, &src_idx)?;
        let a_dst = att.mha.trace_grouped(store, tape, at_dst, at_src, at_src, e)?;
        let a_src = att.mha.trace_grouped(store, tape, at_src, at_dst, at_dst, e)?;
        toward_dst.push(tape.reshape(a_dst, e, dim)?);
        toward_src.push(tape.reshape(a_src, e, dim)?);
    }
    let raw = tape.constant(inputs.edges.clone())?;
    let mut parts = toward_dst;
    parts.extend(toward_src);
    parts.push(raw);
    let cat = tape.concat_cols(&parts)?;
    params.attended_edge_encoder.trace(store, tape, cat)
}

pub fn edge_update(tape: &mut Tape, params: &ModelParams, inputs: &GraphInputs, state: &mut MpState) -> Result<()> {
    let attended = match state.attended {
        Some(a) => a,
        None => return Err(crate::Error::State("edge_update before cross_edge_modality_attention".into())),
    };
    let h_dst = tape.gather_rows(state.nodes, &inputs.dst)?;
    let h_src = tape.gather_rows(state.nodes, &inputs.src)?;
    let cat = tape.concat_cols(&[h_dst, h_src, state.edges, attended])?;
    state.edges = params.edge_mlp.trace(&params.store, tape, cat)?;
    Ok(())
}

/// Separate past and future aggregation, each a plain sum of per-edge
/// messages, then combined by the node MLP.
pub fn node_update_time_aware(tape: &mut Tape, params: &ModelParams, inputs: &GraphInputs, state: &mut MpState) -> Result<()> {
    let n = inputs.num_nodes();
    let store = &params.store;
    let h_src = tape.gather_rows(state.nodes, &inputs.src)?;
    let h_dst = tape.gather_rows(state.nodes, &inputs.dst)?;
    let h0_src = tape.gather_rows(state.initial_nodes, &inputs.src)?;
    let h0_dst = tape.gather_rows(state.initial_nodes, &inputs.dst)?;

    let past_in = tape.concat_cols(&[h_src, state.edges, h0_src])?;
    let past_msg = params.past_mlp.trace(store, tape, past_in)?;
    let past = tape.scatter_add_rows(past_msg, &inputs.dst, n)?;

    let fut_in = tape.concat_cols(&[h_dst, state.edges, h0_dst])?;
    let fut_msg = params.future_mlp.trace(store, tape, fut_in)?;
    let fut = tape.scatter_add_rows(fut_msg, &inputs.src, n)?;

    let cat = tape.concat_cols(&[past, fut])?;
    state.nodes = params.node_mlp.trace(store, tape, cat)?;
    Ok(())
}

/// Single-head graph attention within each frame, self included.
pub fn framewise_gat(tape: &mut Tape, params: &ModelParams, inputs: &GraphInputs, state: &mut MpState) -> Result<()> {
    let n = inputs.num_nodes();
    let store = &params.store;
    let g = &params.gat;
    let proj = tape.param(store, g.proj)?;
    let theta = tape.param(store, g.theta)?;
    let a_t = tape.param(store, g.attn_target)?;
    let a_s = tape.param(store, g.attn_source)?;
    let z = tape.matmul(state.nodes, proj)?;
    let s_t = tape.matmul(z, a_t)?;
    let s_s = tape.matmul(z, a_s)?;
    let lt = tape.gather_rows(s_t, &inputs.gat_target)?;
    let ls = tape.gather_rows(s_s, &inputs.gat_source)?;
    let logits = tape.add(lt, ls)?;
    let logits = tape.act(logits, Activation::LeakyRelu(params.config.gat_slope))?;
    let alpha = tape.segment_softmax(logits, &inputs.gat_target, n)?;
    let msg = tape.matmul(state.nodes, theta)?;
    let msg = tape.gather_rows(msg, &inputs.gat_source)?;
    let msg = tape.mul_col(msg, alpha)?;
    state.nodes = tape.scatter_add_rows(msg, &inputs.gat_target, n)?;
    Ok(())
}

pub fn classify_edges(tape: &mut Tape, params: &ModelParams, state: &MpState) -> Result<Var> {
    params.classifier.trace(&params.store, tape, state.edges)
}

/// Full pass recorded on `tape`; returns the `|E| x 1` score column.
pub fn forward_traced(tape: &mut Tape, params: &ModelParams, inputs: &GraphInputs) -> Result<Var> {
    let mut state = encode_initial(tape, params, inputs)?;
    state.attended = Some(cross_edge_modality_attention(tape, params, inputs)?);
    for _ in 0..params.config.depth {
        edge_update(tape, params, inputs, &mut state)?;
        node_update_time_aware(tape, params, inputs, &mut state)?;
        framewise_gat(tape, params, inputs, &mut state)?;
    }
    classify_edges(tape, params, &state)
}

/// Edge scores for one window, in the graph's edge order.
pub fn forward(graph: &TrackingGraph, frame_knn: &FrameKnnGraph, params: &ModelParams, tape: Option<&mut Tape>) -> Result<Vec<f64>> {
    let inputs = GraphInputs::new(graph, frame_knn, params)?;
    let mut local = Tape::new();
    let tape = tape.unwrap_or(&mut local);
    let scores = forward_traced(tape, params, &inputs)?;
    Ok(tape.value(scores).data().to_vec())
}
