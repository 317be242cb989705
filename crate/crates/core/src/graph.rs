//! Sliding-window tracking graphs.
//!
//! Nodes are detections; directed edges point forward in time between
//! detections of the same category and are selected per node by a
//! normalized kinematic similarity over its past candidates.

use std::collections::{BTreeMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{encode_edge_raw, encode_node_3dpm, Detection3D, EdgeFeatureRaw, NodeFeature};
use crate::geometry::{bev_iou, center_distance_xy, Box3D};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub first_frame: usize,
    pub length: usize,
}

impl Window {
    pub fn frames(&self) -> std::ops::Range<usize> {
        self.first_frame..self.first_frame + self.length
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphConfig {
    pub num_classes: usize,
    pub window_len: usize,
    pub stride: usize,
    pub include_partial: bool,
    pub k_past: usize,
    pub k_frame: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            num_classes: 7,
            window_len: 5,
            stride: 1,
            include_partial: false,
            k_past: 40,
            k_frame: 20,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    /// Scene-level id (see [`global_node_ids`]).
    pub global_id: usize,
    pub det: Detection3D,
    pub feature: NodeFeature,
}

impl GraphNode {
    pub fn frame_index(&self) -> usize {
        self.det.frame_index
    }
    pub fn class_id(&self) -> usize {
        self.det.class_id
    }
}

#[derive(Debug, Clone)]
pub struct GraphEdge {
    /// Earlier endpoint (local node index).
    pub src: usize,
    /// Later endpoint (local node index).
    pub dst: usize,
    pub feature: EdgeFeatureRaw,
    pub label: Option<u8>,
}

/// Directed acyclic, category-disjoint graph over one window.
#[derive(Debug, Clone)]
pub struct TrackingGraph {
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    pub window: Window,
}

/// Per-node same-frame neighbors (no self loops, any category).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FrameKnnGraph {
    pub neighbors: Vec<Vec<usize>>,
}

impl FrameKnnGraph {
    /// Undirected view, each pair reported once as `(min, max)`.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let mut set = std::collections::BTreeSet::new();
        for (a, ns) in self.neighbors.iter().enumerate() {
            for &b in ns {
                set.insert((a.min(b), a.max(b)));
            }
        }
        set.into_iter().collect()
    }
}

/// Window descriptors `[s, s + length)` for `s = 0, stride, ...`.
pub fn sliding_windows(num_frames: usize, length: usize, stride: usize, include_partial: bool) -> Result<Vec<Window>> {
    if length < 2 {
        return Err(Error::InvalidArgument("window length must be at least 2".into()));
    }
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be at least 1".into()));
    }
    let mut out = Vec::new();
    let mut s = 0;
    while s + length <= num_frames {
        out.push(Window { first_frame: s, length });
        s += stride;
    }
    if include_partial && s < num_frames {
        let covered = out.last().map(|w| w.first_frame + w.length).unwrap_or(0);
        if covered < num_frames {
            out.push(Window {
                first_frame: s,
                length: num_frames - s,
            });
        }
    }
    Ok(out)
}

/// Scene-level node ids: detections numbered frame by frame in storage order.
pub fn global_node_ids(frames: &[Vec<Detection3D>]) -> Vec<Vec<usize>> {
    let mut next = 0;
    frames
        .iter()
        .map(|f| {
            let ids: Vec<usize> = (next..next + f.len()).collect();
            next += f.len();
            ids
        })
        .collect()
}

/// Per-candidate normalized kinematic similarity `v*` for target `target`.
///
/// Each raw component (center distance, absolute yaw difference, velocity
/// difference) is min-max normalized over the candidate set before the
/// 1/2, 1/4, 1/4 weighting; the weighted sums are divided by their maximum.
/// Smaller means more similar.
pub fn kinematic_similarity(target: &Detection3D, candidates: &[&Detection3D]) -> Result<Vec<f64>> {
    if candidates.is_empty() {
        return Err(Error::Precondition("kinematic similarity needs at least one candidate".into()));
    }
    let raws = candidates
        .iter()
        .map(|c| encode_edge_raw(c, target))
        .collect::<Result<Vec<_>>>()?;
    if raws.len() == 1 {
        return Ok(vec![1.0]);
    }
    let comps: [Vec<f64>; 3] = [
        raws.iter().map(|r| r.dist()).collect(),
        raws.iter().map(|r| r.yaw_diff().abs()).collect(),
        raws.iter().map(|r| r.vel_diff()).collect(),
    ];
    let normed: Vec<Vec<f64>> = comps.iter().map(|c| min_max_normalize(c)).collect();
    let sums: Vec<f64> = (0..raws.len())
        .map(|q| 0.5 * normed[0][q] + 0.25 * normed[1][q] + 0.25 * normed[2][q])
        .collect();
    let max = sums.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Ok(vec![0.0; raws.len()]);
    }
    Ok(sums.into_iter().map(|s| s / max).collect())
}

fn min_max_normalize(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let range = hi - lo;
    if range > 0.0 {
        v.iter().map(|x| (x - lo) / range).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Builds the window's nodes. Node timestamps are made relative to the
/// earliest detection in the window.
pub fn build_window_nodes(frames: &[Vec<Detection3D>], global_ids: &[Vec<usize>], window: Window, num_classes: usize) -> Result<Vec<GraphNode>> {
    let end = (window.first_frame + window.length).min(frames.len());
    let t0 = (window.first_frame..end)
        .flat_map(|f| frames[f].iter().map(|d| d.timestamp))
        .fold(f64::INFINITY, f64::min);
    let mut nodes = Vec::new();
    for f in window.first_frame..end {
        for (k, det) in frames[f].iter().enumerate() {
            let mut feature = encode_node_3dpm(det, num_classes)?;
            let last = feature.0.len() - 1;
            feature.0[last] -= t0;
            nodes.push(GraphNode {
                global_id: global_ids[f][k],
                det: det.clone(),
                feature,
            });
        }
    }
    Ok(nodes)
}

/// For every node, directed edges from its `k` most similar past
/// same-category candidates. Ties break by `(frame_index, node id)`.
pub fn select_past_knn(nodes: &[GraphNode], k: usize) -> Result<Vec<GraphEdge>> {
    let mut edges = Vec::new();
    for (i, node) in nodes.iter().enumerate() {
        let cands: Vec<usize> = (0..nodes.len())
            .filter(|&q| nodes[q].class_id() == node.class_id() && nodes[q].det.timestamp < node.det.timestamp)
            .collect();
        if cands.is_empty() || k == 0 {
            continue;
        }
        let cand_dets: Vec<&Detection3D> = cands.iter().map(|&q| &nodes[q].det).collect();
        let sims = kinematic_similarity(&node.det, &cand_dets)?;
        let mut order: Vec<usize> = (0..cands.len()).collect();
        order.sort_by(|&a, &b| {
            sims[a]
                .total_cmp(&sims[b])
                .then(nodes[cands[a]].frame_index().cmp(&nodes[cands[b]].frame_index()))
                .then(cands[a].cmp(&cands[b]))
        });
        for &o in order.iter().take(k) {
            let j = cands[o];
            edges.push(GraphEdge {
                src: j,
                dst: i,
                feature: encode_edge_raw(&nodes[j].det, &node.det)?,
                label: None,
            });
        }
    }
    Ok(edges)
}

/// Ground-truth box of one annotated instance in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub instance: u64,
    pub class_id: usize,
    pub bbox: Box3D,
}

/// Greedy per-frame matching in ascending center-distance order among
/// same-class pairs passing both the radius and the BEV-IoU gate.
pub fn match_detections_to_gt(dets: &[Vec<Detection3D>], annotations: &[Vec<GtBox>], radius: f64, iou_min: f64) -> Result<Vec<Vec<Option<u64>>>> {
    let mut out = Vec::with_capacity(dets.len());
    for (f, frame_dets) in dets.iter().enumerate() {
        let gts: &[GtBox] = annotations.get(f).map(|v| v.as_slice()).unwrap_or(&[]);
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (d, det) in frame_dets.iter().enumerate() {
            for (g, gt) in gts.iter().enumerate() {
                if gt.class_id != det.class_id {
                    continue;
                }
                let dist = center_distance_xy(&det.bbox, &gt.bbox);
                if dist > radius {
                    continue;
                }
                if bev_iou(&det.bbox, &gt.bbox)? < iou_min {
                    continue;
                }
                pairs.push((dist, d, g));
            }
        }
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut assigned = vec![None; frame_dets.len()];
        let mut gt_used = vec![false; gts.len()];
        for (_, d, g) in pairs {
            if assigned[d].is_none() && !gt_used[g] {
                assigned[d] = Some(gts[g].instance);
                gt_used[g] = true;
            }
        }
        out.push(assigned);
    }
    Ok(out)
}

/// Sets `label` on every edge: 1 iff both endpoints carry the same instance
/// and no node of that instance lies in a frame strictly between them.
pub fn label_edges(graph: &mut TrackingGraph) {
    let mut frames_of: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for n in &graph.nodes {
        if let Some(id) = n.det.gt_instance {
            frames_of.entry(id).or_default().push(n.frame_index());
        }
    }
    for fs in frames_of.values_mut() {
        fs.sort_unstable();
    }
    for e in &mut graph.edges {
        let a = &graph.nodes[e.src];
        let b = &graph.nodes[e.dst];
        let label = match (a.det.gt_instance, b.det.gt_instance) {
            (Some(x), Some(y)) if x == y => {
                let (fa, fb) = (a.frame_index(), b.frame_index());
                let between = frames_of[&x].iter().any(|&f| f > fa && f < fb);
                u8::from(!between)
            }
            _ => 0,
        };
        e.label = Some(label);
    }
}

/// Per node, its `k_frame` nearest same-frame nodes by BEV center distance.
pub fn build_frame_knn(graph: &TrackingGraph, k_frame: usize) -> FrameKnnGraph {
    let n = graph.nodes.len();
    let mut by_frame: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (idx, node) in graph.nodes.iter().enumerate() {
        by_frame.entry(node.frame_index()).or_default().push(idx);
    }
    let mut neighbors = vec![Vec::new(); n];
    for members in by_frame.values() {
        for &a in members {
            let mut others: Vec<(f64, usize)> = members
                .iter()
                .filter(|&&b| b != a)
                .map(|&b| (center_distance_xy(&graph.nodes[a].det.bbox, &graph.nodes[b].det.bbox), b))
                .collect();
            others.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.cmp(&y.1)));
            neighbors[a] = others.into_iter().take(k_frame).map(|(_, b)| b).collect();
        }
    }
    FrameKnnGraph { neighbors }
}

impl TrackingGraph {
    pub fn build(frames: &[Vec<Detection3D>], global_ids: &[Vec<usize>], window: Window, cfg: &GraphConfig) -> Result<Self> {
        let nodes = build_window_nodes(frames, global_ids, window, cfg.num_classes)?;
        let edges = select_past_knn(&nodes, cfg.k_past)?;
        Ok(Self { nodes, edges, window })
    }

    pub fn is_labeled(&self) -> bool {
        self.edges.iter().all(|e| e.label.is_some())
    }

    pub fn labels(&self) -> Option<Vec<f64>> {
        self.edges.iter().map(|e| e.label.map(f64::from)).collect()
    }

    /// Checks the structural invariants: forward-in-time, same-category,
    /// no duplicate pairs.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.edges {
            let (a, b) = (&self.nodes[e.src], &self.nodes[e.dst]);
            if !(a.det.timestamp < b.det.timestamp) {
                return Err(Error::State(format!("edge {}->{} is not forward in time", e.src, e.dst)));
            }
            if a.class_id() != b.class_id() {
                return Err(Error::State(format!("edge {}->{} crosses categories", e.src, e.dst)));
            }
            if !seen.insert((e.src, e.dst)) {
                return Err(Error::State(format!("duplicate edge {}->{}", e.src, e.dst)));
            }
        }
        Ok(())
    }
}

/// A graph together with its frame-wise neighborhoods.
#[derive(Debug, Clone)]
pub struct WindowGraph {
    pub graph: TrackingGraph,
    pub frame_knn: FrameKnnGraph,
}

/// Builds all windows of a scene. Windows are independent and built in
/// parallel; output order follows window order.
pub fn build_scene_graphs(frames: &[Vec<Detection3D>], cfg: &GraphConfig) -> Result<Vec<WindowGraph>> {
    let ids = global_node_ids(frames);
    let windows = sliding_windows(frames.len(), cfg.window_len, cfg.stride, cfg.include_partial)?;
    windows
        .into_par_iter()
        .map(|w| {
            let graph = TrackingGraph::build(frames, &ids, w, cfg)?;
            let frame_knn = build_frame_knn(&graph, cfg.k_frame);
            Ok(WindowGraph { graph, frame_knn })
        })
        .collect()
}

/// Copies GT instance ids from a matching result onto the detections.
pub fn apply_gt_assignment(frames: &mut [Vec<Detection3D>], assignment: &[Vec<Option<u64>>]) {
    for (f, dets) in frames.iter_mut().enumerate() {
        for (d, det) in dets.iter_mut().enumerate() {
            det.gt_instance = assignment.get(f).and_then(|a| a.get(d).copied()).flatten();
        }
    }
}
