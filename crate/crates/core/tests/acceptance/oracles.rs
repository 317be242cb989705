//! Criteria checked against independent oracles: gradients, BEV IoU,
//! clustering, assignment, metrics hand-traces and entropy.

use std::collections::BTreeMap;

use graphtrack::cluster::{agglomerate, average_overlapping_scores, ClusterSet, ScoredEdge, ScoredEdgeSet};
use graphtrack::confidence::batch_entropy;
use graphtrack::features::{Detection3D, ModalityEmbedding, ModalityTag};
use graphtrack::geometry::{bev_iou, Box3D};
use graphtrack::gnn::{class_balanced_loss, forward_traced, Fusion, ModalitySpec, ModelConfig, ModelParams, TrainingWindow};
use graphtrack::graph::{build_scene_graphs, label_edges, GraphConfig};
use graphtrack::metrics::{amota_sweep, assignment_cost, clear_mot, evaluate, hungarian_assign, EvalScene, MatchGate, RECALL_POINTS};
use graphtrack::nn::{finite_difference_check, Activation, GradCheckReport, MhaParams, Mlp, ParamStore, Tensor};
use graphtrack::track::{TrackState, Trajectory, TrajectorySet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::Outcome;

const GRAD_TOL: f64 = 1e-4;
const FD_STEP: f64 = 1e-5;

fn merge(into: &mut GradCheckReport, r: GradCheckReport) {
    into.max_rel_err = into.max_rel_err.max(r.max_rel_err);
    into.checked += r.checked;
    into.one_sided += r.one_sided;
    into.skipped += r.skipped;
}

fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::new(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Layer-level checks: every activation through an MLP, grouped
/// multi-head attention, and the segment softmax used by graph attention.
fn layer_gradients(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total = GradCheckReport::default();
    for act in [Activation::Identity, Activation::Relu, Activation::LeakyRelu(0.2), Activation::Sigmoid] {
        let mut store = ParamStore::new();
        let mlp = Mlp::new(&mut store, "mlp", &[4, 5, 3], act, act, &mut rng).unwrap();
        let x = store.add("x", random_tensor(6, 4, &mut rng));
        let r = finite_difference_check(&store, FD_STEP, |s, t| {
            let xv = t.param(s, x)?;
            let y = mlp.trace(s, t, xv)?;
            let y = t.act(y, Activation::Sigmoid)?;
            t.sum(y)
        })
        .unwrap();
        merge(&mut total, r);
    }

    let mut store = ParamStore::new();
    let mha = MhaParams::new(&mut store, "mha", 3, 3, 2, 3, &mut rng).unwrap();
    let q = store.add("q", random_tensor(4, 3, &mut rng));
    let kv = store.add("kv", random_tensor(4, 3, &mut rng));
    let r = finite_difference_check(&store, FD_STEP, |s, t| {
        let (qv, kvv) = (t.param(s, q)?, t.param(s, kv)?);
        let y = mha.trace_grouped(s, t, qv, kvv, kvv, 2)?;
        let y = t.act(y, Activation::Sigmoid)?;
        t.sum(y)
    })
    .unwrap();
    merge(&mut total, r);

    let mut store = ParamStore::new();
    let logits = store.add("logits", random_tensor(7, 1, &mut rng));
    let values = store.add("values", random_tensor(7, 2, &mut rng));
    let seg = [0, 0, 1, 2, 2, 2, 1];
    let r = finite_difference_check(&store, FD_STEP, |s, t| {
        let l = t.param(s, logits)?;
        let a = t.segment_softmax(l, &seg, 3)?;
        let v = t.param(s, values)?;
        let w = t.mul_col(v, a)?;
        let agg = t.scatter_add_rows(w, &seg, 3)?;
        let y = t.act(agg, Activation::Sigmoid)?;
        t.sum(y)
    })
    .unwrap();
    merge(&mut total, r);
    total
}

/// Two to five frames with one or two labeled detections each, so at most
/// ten nodes, with randomly missing modality vectors.
fn random_window_frames(rng: &mut ChaCha8Rng) -> Vec<Vec<Detection3D>> {
    let frames = rng.random_range(2..=5);
    let per_frame = rng.random_range(1..=2);
    (0..frames)
        .map(|f| {
            (0..per_frame)
                .map(|k| {
                    let center = [k as f64 * 3.0 + f as f64 * 0.6 + rng.random_range(-0.3..0.3), rng.random_range(-1.0..1.0), 0.0];
                    let bbox = Box3D::new(center, [1.8, 4.2, 1.5], rng.random_range(-3.0..3.0)).unwrap();
                    let velocity = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
                    let mut d = Detection3D::new(bbox, velocity, k % 2, rng.random_range(0.2..1.0), f, f as f64 * 0.5);
                    d.gt_instance = Some(if rng.random_bool(0.8) { k as u64 } else { 10 + (f * 2 + k) as u64 });
                    for (tag, dim) in [(ModalityTag::Lidar, 4), (ModalityTag::Camera, 2)] {
                        let m = if rng.random_bool(0.3) {
                            ModalityEmbedding::absent(tag, dim)
                        } else {
                            ModalityEmbedding::present(tag, (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect())
                        };
                        d.modalities.insert(tag, m);
                    }
                    d
                })
                .collect()
        })
        .collect()
}

/// Full forward pass plus class-balanced loss on one random window.
fn model_gradient(seed: u64) -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames = random_window_frames(&mut rng);
    let graph_cfg = GraphConfig {
        num_classes: 2,
        window_len: frames.len(),
        k_past: 3,
        k_frame: 2,
        ..GraphConfig::default()
    };
    let mut window = build_scene_graphs(&frames, &graph_cfg).unwrap().remove(0);
    label_edges(&mut window.graph);
    let fusion = [Fusion::Attention, Fusion::NodeStack, Fusion::None][seed as usize % 3];
    let cfg = ModelConfig {
        num_classes: 2,
        hidden: 6,
        depth: rng.random_range(1..=3),
        heads: 2,
        modality_tokens: 2,
        fusion,
        modalities: vec![ModalitySpec { tag: ModalityTag::Lidar, dim: 4 }, ModalitySpec { tag: ModalityTag::Camera, dim: 2 }],
        gat_slope: 0.2,
        seed,
    };
    let mut params = ModelParams::new(cfg).unwrap();
    // Glorot weights with zero biases leave many units exactly at the ReLU
    // kink; random biases and absent tokens make the check meaningful.
    for id in params.store.ids().collect::<Vec<_>>() {
        for v in params.store.get_mut(id).data_mut() {
            *v += rng.random_range(-0.3..0.3);
        }
    }
    let win = TrainingWindow::new(&window, &params, &[3, 2], 0.8).unwrap();
    let shell = params.clone();
    finite_difference_check(&params.store, FD_STEP, |store, tape| {
        let mut p = shell.clone();
        p.store = store.clone();
        let s = forward_traced(tape, &p, &win.inputs)?;
        class_balanced_loss(tape, s, &win.labels, &win.weights)
    })
    .unwrap()
}

pub fn gradients() -> Outcome {
    let mut layers = GradCheckReport::default();
    for seed in 0..5 {
        merge(&mut layers, layer_gradients(seed));
    }
    let mut model = GradCheckReport::default();
    let graphs = 21;
    for seed in 0..graphs {
        merge(&mut model, model_gradient(100 + seed));
    }
    let worst = layers.max_rel_err.max(model.max_rel_err);
    Outcome::new(
        "gradient suite",
        worst < GRAD_TOL && model.checked > 0,
        format!(
            "max rel err {worst:.2e} (< {GRAD_TOL:.0e}); layers {} entries, model {} entries on {graphs} graphs, {} one-sided, {} skipped at kinks",
            layers.checked,
            model.checked,
            layers.one_sided + model.one_sided,
            layers.skipped + model.skipped
        ),
    )
}

/// Stratified Monte-Carlo estimate over the union bounding box: one jittered
/// sample per cell of a `side x side` grid.
fn monte_carlo_iou(a: &Box3D, b: &Box3D, side: usize, rng: &mut ChaCha8Rng) -> f64 {
    let corners: Vec<[f64; 2]> = a.footprint().into_iter().chain(b.footprint()).collect();
    let (x0, x1) = corners.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[0]), hi.max(p[0])));
    let (y0, y1) = corners.iter().fold((f64::MAX, f64::MIN), |(lo, hi), p| (lo.min(p[1]), hi.max(p[1])));
    let inside = |bx: &Box3D, x: f64, y: f64| {
        let (s, c) = bx.yaw.sin_cos();
        let (dx, dy) = (x - bx.center[0], y - bx.center[1]);
        (c * dx + s * dy).abs() <= 0.5 * bx.size[1] && (-s * dx + c * dy).abs() <= 0.5 * bx.size[0]
    };
    let (cw, ch) = ((x1 - x0) / side as f64, (y1 - y0) / side as f64);
    let (mut both, mut either) = (0u64, 0u64);
    for gx in 0..side {
        for gy in 0..side {
            let x = x0 + (gx as f64 + rng.random::<f64>()) * cw;
            let y = y0 + (gy as f64 + rng.random::<f64>()) * ch;
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            both += (ia && ib) as u64;
            either += (ia || ib) as u64;
        }
    }
    if either == 0 {
        0.0
    } else {
        both as f64 / either as f64
    }
}

pub fn bev_iou_oracle() -> Outcome {
    const TOL: f64 = 2e-3;
    let unit = Box3D::new([0.0; 3], [1.0; 3], 0.0).unwrap();
    let far = Box3D::new([100.0, 0.0, 0.0], [1.0; 3], 0.0).unwrap();
    let sq = |x: f64| Box3D::new([x, 0.0, 0.0], [2.0, 2.0, 1.0], 0.0).unwrap();
    let analytic = bev_iou(&unit, &unit).unwrap() == 1.0 && bev_iou(&unit, &far).unwrap() == 0.0 && (bev_iou(&sq(0.0), &sq(1.0)).unwrap() - 1.0 / 3.0).abs() < 1e-15;

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst: f64 = 0.0;
    let pairs = 200;
    for _ in 0..pairs {
        let a = Box3D::new(
            [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), 0.0],
            [rng.random_range(0.5..3.0), rng.random_range(0.5..5.0), 1.0],
            rng.random_range(-3.2..3.2),
        )
        .unwrap();
        let b = Box3D::new(
            [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), 0.0],
            [rng.random_range(0.5..3.0), rng.random_range(0.5..5.0), 1.0],
            rng.random_range(-3.2..3.2),
        )
        .unwrap();
        let exact = bev_iou(&a, &b).unwrap();
        worst = worst.max((exact - monte_carlo_iou(&a, &b, 1000, &mut rng)).abs());
    }
    Outcome::new(
        "BEV IoU vs Monte Carlo",
        analytic && worst < TOL,
        format!("analytic cases {}, max |exact - MC| {worst:.2e} (< {TOL:.0e}) over {pairs} pairs at 10^6 samples", if analytic { "exact" } else { "WRONG" }),
    )
}

/// Straightforward replay of the greedy linking rules: clusters live in
/// a vector of optional node lists indexed by creation order, edges are
/// picked by repeated maximum search, and roles are found by scanning.
fn naive_agglomerate(edges: &[(usize, usize, f64)], theta_min: f64, theta_join: f64) -> ClusterSet {
    let mut pending: Vec<(usize, usize, f64)> = edges.iter().copied().filter(|e| e.2 >= theta_min).collect();
    let mut clusters: Vec<Option<Vec<usize>>> = Vec::new();
    let owner = |clusters: &Vec<Option<Vec<usize>>>, n: usize| clusters.iter().position(|c| c.as_ref().is_some_and(|c| c.contains(&n)));
    while !pending.is_empty() {
        let mut best = 0;
        for k in 1..pending.len() {
            let (a, b) = (pending[k], pending[best]);
            if a.2 > b.2 || (a.2 == b.2 && (a.0, a.1) < (b.0, b.1)) {
                best = k;
            }
        }
        let (j, i, score) = pending.remove(best);
        match (owner(&clusters, j), owner(&clusters, i)) {
            (None, None) => clusters.push(Some(vec![j, i])),
            (None, Some(ci)) => {
                let c = clusters[ci].as_mut().unwrap();
                if c[0] == i {
                    c.insert(0, j);
                }
            }
            (Some(cj), None) => {
                let c = clusters[cj].as_mut().unwrap();
                if *c.last().unwrap() == j {
                    c.push(i);
                }
            }
            (Some(cj), Some(ci)) => {
                let trailing = *clusters[cj].as_ref().unwrap().last().unwrap() == j;
                let leading = clusters[ci].as_ref().unwrap()[0] == i;
                if cj != ci && trailing && leading && score >= theta_join {
                    let tail = clusters[ci].take().unwrap();
                    clusters[cj].as_mut().unwrap().extend(tail);
                }
            }
        }
    }
    let mut out = ClusterSet::default();
    for (id, c) in clusters.into_iter().enumerate() {
        if let Some(nodes) = c {
            for &n in &nodes {
                out.visited.insert(n, id);
            }
            out.clusters.insert(id, nodes);
        }
    }
    out
}

/// Node-disjoint, strictly time-increasing, non-branching.
fn well_formed(cs: &ClusterSet, frame_of: &[usize]) -> bool {
    let mut seen = BTreeMap::new();
    for (id, nodes) in &cs.clusters {
        if nodes.len() < 2 || nodes.windows(2).any(|w| frame_of[w[0]] >= frame_of[w[1]]) {
            return false;
        }
        for &n in nodes {
            if seen.insert(n, *id).is_some() {
                return false;
            }
        }
    }
    seen == cs.visited
}

fn traced_examples() -> bool {
    let set = |edges: &[(usize, usize, f64)]| average_overlapping_scores(&[edges.to_vec()]);
    let (a, b, c, d) = (0, 1, 2, 3);
    let chain = agglomerate(&set(&[(a, b, 0.9), (b, c, 0.8), (a, c, 0.3)]), 0.1, 0.5);
    let conflict = agglomerate(&set(&[(a, c, 0.9), (b, c, 0.8)]), 0.1, 0.5);
    let join = agglomerate(&set(&[(a, b, 0.9), (c, d, 0.8), (b, c, 0.7)]), 0.1, 0.5);
    chain.clusters.values().collect::<Vec<_>>() == vec![&vec![a, b, c]]
        && conflict.clusters.values().collect::<Vec<_>>() == vec![&vec![a, c]]
        && !conflict.visited.contains_key(&b)
        && join.clusters.values().collect::<Vec<_>>() == vec![&vec![a, b, c, d]]
}

pub fn clustering_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let graphs = 1000;
    let (mut mismatches, mut malformed, mut total_edges) = (0, 0, 0);
    for _ in 0..graphs {
        let n = rng.random_range(2..=12);
        let frame_of: Vec<usize> = (0..n).map(|_| rng.random_range(0..6)).collect();
        let mut edges = Vec::new();
        for _ in 0..rng.random_range(0..=30) {
            let (j, i) = (rng.random_range(0..n), rng.random_range(0..n));
            if frame_of[j] < frame_of[i] && !edges.iter().any(|e: &(usize, usize, f64)| (e.0, e.1) == (j, i)) {
                // Coarse scores make ties common.
                let score = if rng.random_bool(0.5) { (rng.random_range(0..10) as f64) / 10.0 } else { rng.random::<f64>() };
                edges.push((j, i, score));
            }
        }
        total_edges += edges.len();
        let theta_join = rng.random_range(0.0..1.0);
        let scored = ScoredEdgeSet {
            edges: edges.iter().map(|&(src, dst, score)| ScoredEdge { src, dst, score, windows: 1 }).collect(),
        };
        let fast = agglomerate(&scored, 0.1, theta_join);
        if fast != naive_agglomerate(&edges, 0.1, theta_join) {
            mismatches += 1;
        }
        if !well_formed(&fast, &frame_of) {
            malformed += 1;
        }
    }
    let traced = traced_examples();
    Outcome::new(
        "clustering vs naive replay",
        mismatches == 0 && malformed == 0 && traced,
        format!(
            "{mismatches} mismatches, {malformed} malformed over {graphs} graphs ({total_edges} edges); chain/conflict/join traces {}",
            if traced { "reproduced" } else { "DIFFER" }
        ),
    )
}

fn brute_force_min(cost: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>) -> f64 {
        if row == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for c in 0..used.len() {
            if !used[c] {
                used[c] = true;
                best = best.min(cost[row][c] + go(cost, row + 1, used));
                used[c] = false;
            }
        }
        best
    }
    let rows = cost.len();
    let cols = cost[0].len();
    if rows <= cols {
        go(cost, 0, &mut vec![false; cols])
    } else {
        let t: Vec<Vec<f64>> = (0..cols).map(|c| (0..rows).map(|r| cost[r][c]).collect()).collect();
        go(&t, 0, &mut vec![false; rows])
    }
}

pub fn assignment_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let matrices = 500;
    let mut bad = 0;
    let mut worst: f64 = 0.0;
    for k in 0..matrices {
        let (rows, cols) = (rng.random_range(1..=7), rng.random_range(1..=7));
        let integer = k % 2 == 0;
        let cost: Vec<Vec<f64>> = (0..rows)
            .map(|_| (0..cols).map(|_| if integer { rng.random_range(0..10) as f64 } else { rng.random_range(0.0..100.0) }).collect())
            .collect();
        let pairs = hungarian_assign(&cost).unwrap();
        let mut rows_used = vec![false; rows];
        let mut cols_used = vec![false; cols];
        let one_to_one = pairs.len() == rows.min(cols)
            && pairs.iter().all(|&(r, c)| !std::mem::replace(&mut rows_used[r], true) && !std::mem::replace(&mut cols_used[c], true));
        let gap = (assignment_cost(&cost, &pairs) - brute_force_min(&cost)).abs();
        worst = worst.max(gap);
        if !one_to_one || gap > 1e-9 {
            bad += 1;
        }
    }
    Outcome::new(
        "assignment vs brute force",
        bad == 0,
        format!("{bad} of {matrices} matrices (up to 7x7) off the permutation minimum; max gap {worst:.1e}"),
    )
}

fn state(frame: usize, x: f64, score: f64) -> TrackState {
    TrackState {
        frame_index: frame,
        bbox: Box3D::new([x, 0.0, 0.0], [1.8, 4.0, 1.5], 0.0).unwrap(),
        velocity: [0.0; 2],
        score,
    }
}

fn track(id: u64, states: Vec<TrackState>) -> Trajectory {
    Trajectory { track_id: id, class_id: 0, states }
}

pub fn metrics_traces() -> Outcome {
    let gate = MatchGate::default();
    let gt = TrajectorySet::new(vec![
        track(100, (0..3).map(|f| state(f, 0.0, 1.0)).collect()),
        track(200, (0..3).map(|f| state(f, 20.0, 1.0)).collect()),
    ]);
    // Track 1 loses the first object after frame 1 and track 2 picks it up
    // (one switch), the second object is missed at frame 2, track 4 is clutter.
    let scripted = TrajectorySet::new(vec![
        track(1, vec![state(0, 0.1, 0.9), state(1, 0.1, 0.9)]),
        track(2, vec![state(2, 0.1, 0.9)]),
        track(3, vec![state(0, 20.2, 0.8), state(1, 20.2, 0.8)]),
        track(4, vec![state(0, 60.0, 0.3)]),
    ]);
    let c = clear_mot(&scripted, &gt, &gate).unwrap().counts;
    let scripted_ok = (c.gt, c.fp, c.fn_, c.ids) == (6, 1, 1, 1) && c.mota().unwrap() == 0.5;
    let perfect = evaluate(&[EvalScene { pred: gt.clone(), gt: gt.clone() }], &gate, RECALL_POINTS).unwrap();
    let perfect_ok = perfect.overall.mota == 1.0 && perfect.overall.amota == 1.0;
    let (empty_amota, _, _) = amota_sweep(&[EvalScene { pred: TrajectorySet::default(), gt }], &gate, None, RECALL_POINTS).unwrap();
    Outcome::new(
        "metrics hand-traces",
        scripted_ok && perfect_ok && empty_amota == 0.0,
        format!(
            "scripted MOTA {} (FP {} FN {} IDS {}), perfect MOTA {} AMOTA {}, empty AMOTA {empty_amota}",
            c.mota().unwrap(),
            c.fp,
            c.fn_,
            c.ids,
            perfect.overall.mota,
            perfect.overall.amota
        ),
    )
}

pub fn entropy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut uniform_err: f64 = 0.0;
    for n in 2..200 {
        let v = rng.random_range(0.01..1.0);
        uniform_err = uniform_err.max((batch_entropy(&vec![v; n]).unwrap() - 1.0).abs());
    }
    let degenerate = batch_entropy(&[1.0, 0.0, 0.0, 0.0]).unwrap();
    let mut scale_err: f64 = 0.0;
    for _ in 0..1000 {
        let scores: Vec<f64> = (0..rng.random_range(2..60)).map(|_| rng.random::<f64>()).collect();
        let factor = 10f64.powf(rng.random_range(-6.0..6.0));
        let scaled: Vec<f64> = scores.iter().map(|s| s * factor).collect();
        scale_err = scale_err.max((batch_entropy(&scores).unwrap() - batch_entropy(&scaled).unwrap()).abs());
    }
    Outcome::new(
        "entropy",
        uniform_err < 1e-12 && degenerate == 0.0 && scale_err < 1e-12,
        format!("uniform |H - 1| {uniform_err:.1e}, degenerate H {degenerate}, rescaling changes H by at most {scale_err:.1e} on 1000 fuzzed batches"),
    )
}
