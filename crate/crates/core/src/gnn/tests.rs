use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::features::{Detection3D, ModalityEmbedding, ModalityTag};
use crate::geometry::Box3D;
use crate::graph::{build_frame_knn, global_node_ids, label_edges, FrameKnnGraph, GraphConfig, TrackingGraph, Window, WindowGraph};
use crate::nn::{finite_difference_check, mlp_forward, multihead_attention, Tape, Tensor};

fn small_config(fusion: Fusion, depth: usize) -> ModelConfig {
    ModelConfig {
        num_classes: 2,
        hidden: 6,
        depth,
        heads: 2,
        modality_tokens: 2,
        fusion,
        modalities: vec![
            ModalitySpec {
                tag: ModalityTag::Lidar,
                dim: 4,
            },
            ModalitySpec {
                tag: ModalityTag::Camera,
                dim: 2,
            },
        ],
        gat_slope: 0.2,
        seed: 5,
    }
}

/// Two objects per frame moving along x, with random embeddings; every
/// third detection misses its camera vector.
fn toy_frames(frames: usize, per_frame: usize, seed: u64) -> Vec<Vec<Detection3D>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..frames)
        .map(|f| {
            (0..per_frame)
                .map(|k| {
                    let x = k as f64 * 4.0 + f as f64 * 0.5 + rng.random_range(-0.1..0.1);
                    let bbox = Box3D::new([x, k as f64 * 3.0, 0.0], [1.8, 4.2, 1.5], 0.1 * k as f64).unwrap();
                    let mut d = Detection3D::new(bbox, [1.0, 0.0], k % 2, rng.random_range(0.3..1.0), f, f as f64 * 0.5);
                    d.gt_instance = Some(k as u64);
                    let lidar: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
                    d.modalities.insert(ModalityTag::Lidar, ModalityEmbedding::present(ModalityTag::Lidar, lidar));
                    let cam = if (f + k) % 3 == 0 {
                        ModalityEmbedding::absent(ModalityTag::Camera, 2)
                    } else {
                        ModalityEmbedding::present(ModalityTag::Camera, vec![rng.random_range(-1.0..1.0), 0.5])
                    };
                    d.modalities.insert(ModalityTag::Camera, cam);
                    d
                })
                .collect()
        })
        .collect()
}

fn toy_window(frames: usize, per_frame: usize, seed: u64) -> WindowGraph {
    let dets = toy_frames(frames, per_frame, seed);
    let cfg = GraphConfig {
        num_classes: 2,
        window_len: frames,
        k_past: 3,
        k_frame: 2,
        ..GraphConfig::default()
    };
    let ids = global_node_ids(&dets);
    let mut graph = TrackingGraph::build(&dets, &ids, Window { first_frame: 0, length: frames }, &cfg).unwrap();
    label_edges(&mut graph);
    let frame_knn = build_frame_knn(&graph, cfg.k_frame);
    WindowGraph { graph, frame_knn }
}

fn randomize(params: &mut ModelParams, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for id in params.store.ids().collect::<Vec<_>>() {
        for v in params.store.get_mut(id).data_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
    }
}

#[test]
fn empty_and_single_node_graphs() {
    let params = ModelParams::new(small_config(Fusion::Attention, 2)).unwrap();
    let empty = TrackingGraph {
        nodes: vec![],
        edges: vec![],
        window: Window { first_frame: 0, length: 1 },
    };
    let knn = FrameKnnGraph { neighbors: vec![] };
    let inputs = GraphInputs::new(&empty, &knn, &params).unwrap();
    let mut tape = Tape::new();
    let st = encode_initial(&mut tape, &params, &inputs).unwrap();
    assert_eq!(tape.value(st.nodes).rows(), 0);
    assert!(forward(&empty, &knn, &params, None).unwrap().is_empty());

    let w = toy_window(1, 1, 0);
    let inputs = GraphInputs::new(&w.graph, &w.frame_knn, &params).unwrap();
    let mut tape = Tape::new();
    let st = encode_initial(&mut tape, &params, &inputs).unwrap();
    assert_eq!(tape.value(st.nodes).rows(), 1);
    assert_eq!(tape.value(st.edges).rows(), 0);
    assert!(forward(&w.graph, &w.frame_knn, &params, None).unwrap().is_empty());
}

/// Two frames of one node each but different classes: nodes, no edges.
#[test]
fn edgeless_window_trains_to_zero_loss() {
    let mut dets = toy_frames(2, 1, 4);
    dets[1][0].class_id = 1;
    let cfg = GraphConfig {
        num_classes: 2,
        window_len: 2,
        ..GraphConfig::default()
    };
    let ids = global_node_ids(&dets);
    let mut graph = TrackingGraph::build(&dets, &ids, Window { first_frame: 0, length: 2 }, &cfg).unwrap();
    assert!(graph.edges.is_empty());
    label_edges(&mut graph);
    let frame_knn = build_frame_knn(&graph, 2);
    let params = ModelParams::new(small_config(Fusion::Attention, 2)).unwrap();
    let win = TrainingWindow::new(&WindowGraph { graph, frame_knn }, &params, &[1, 1], 0.8).unwrap();
    let (loss, grads) = window_loss(&params, &win).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(grads.l2_norm(), 0.0);
}

#[test]
fn scores_in_open_unit_interval_and_deterministic() {
    let w = toy_window(4, 4, 1);
    for fusion in [Fusion::None, Fusion::Attention, Fusion::NodeStack] {
        let params = ModelParams::new(small_config(fusion, 3)).unwrap();
        let a = forward(&w.graph, &w.frame_knn, &params, None).unwrap();
        let b = forward(&w.graph, &w.frame_knn, &params, None).unwrap();
        assert_eq!(a.len(), w.graph.edges.len());
        assert!(a.iter().all(|&s| s > 0.0 && s < 1.0));
        assert_eq!(a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
}

#[test]
fn zero_classifier_head_gives_half() {
    let w = toy_window(3, 3, 2);
    let mut params = ModelParams::new(small_config(Fusion::Attention, 2)).unwrap();
    let last = params.classifier.layers.last().unwrap().clone();
    *params.store.get_mut(last.weight) = Tensor::zeros(6, 1);
    *params.store.get_mut(last.bias) = Tensor::zeros(1, 1);
    let s = forward(&w.graph, &w.frame_knn, &params, None).unwrap();
    assert!(!s.is_empty());
    assert!(s.iter().all(|&v| v == 0.5));
}

#[test]
fn zero_depth_is_encode_then_classify() {
    let w = toy_window(3, 3, 3);
    let params = ModelParams::new(small_config(Fusion::Attention, 0)).unwrap();
    let inputs = GraphInputs::new(&w.graph, &w.frame_knn, &params).unwrap();
    let mut tape = Tape::new();
    let st = encode_initial(&mut tape, &params, &inputs).unwrap();
    let s = classify_edges(&mut tape, &params, &st).unwrap();
    assert_eq!(tape.value(s).data(), forward(&w.graph, &w.frame_knn, &params, None).unwrap().as_slice());
}

#[test]
fn forward_equals_composed_steps() {
    let w = toy_window(5, 2, 4);
    assert_eq!(w.graph.nodes.len(), 10);
    let mut params = ModelParams::new(small_config(Fusion::Attention, 2)).unwrap();
    randomize(&mut params, 11);
    let inputs = GraphInputs::new(&w.graph, &w.frame_knn, &params).unwrap();
    let mut tape = Tape::new();
    let mut st = encode_initial(&mut tape, &params, &inputs).unwrap();
    st.attended = Some(cross_edge_modality_attention(&mut tape, &params, &inputs).unwrap());
    for _ in 0..2 {
        edge_update(&mut tape, &params, &inputs, &mut st).unwrap();
        node_update_time_aware(&mut tape, &params, &inputs, &mut st).unwrap();
        framewise_gat(&mut tape, &params, &inputs, &mut st).unwrap();
    }
    let s = classify_edges(&mut tape, &params, &st).unwrap();
    assert_eq!(tape.value(s).data(), forward(&w.graph, &w.frame_knn, &params, None).unwrap().as_slice());
}

#[test]
fn attention_matches_per_edge_evaluation() {
    let w = toy_window(2, 2, 6);
    let mut params = ModelParams::new(small_config(Fusion::Attention, 1)).unwrap();
    randomize(&mut params, 12);
    let inputs = GraphInputs::new(&w.graph, &w.frame_knn, &params).unwrap();
    let mut tape = Tape::new();
    let att = cross_edge_modality_attention(&mut tape, &params, &inputs).unwrap();
    let batched = tape.value(att).clone();
    assert!(w.graph.edges.len() >= 2);

    let tokens = params.config.modality_tokens;
    for (k, e) in w.graph.edges.iter().enumerate() {
        let mut toward_dst = Vec::new();
        let mut toward_src = Vec::new();
        for a in &params.attention {
            let emb = |node: usize| -> Tensor {
                let v = match w.graph.nodes[node].det.embedding(a.spec.tag) {
                    Some(v) => v.to_vec(),
                    None => params.store.get(a.absent_token).data().to_vec(),
                };
                Tensor::new(tokens, a.spec.dim / tokens, v).unwrap()
            };
            let (xi, xj) = (emb(e.dst), emb(e.src));
            toward_dst.extend(multihead_attention(&a.mha, &params.store, &xi, &xj, &xj, None).unwrap().into_data());
            toward_src.extend(multihead_attention(&a.mha, &params.store, &xj, &xi, &xi, None).unwrap().into_data());
        }
        let mut row = toward_dst;
        row.extend(toward_src);
        row.extend(inputs.edges.row(k));
        let n = row.len();
        let expect = mlp_forward(&params.attended_edge_encoder, &params.store, &Tensor::new(1, n, row).unwrap(), None).unwrap();
        for (a, b) in batched.row(k).iter().zip(expect.data()) {
            assert!((a - b).abs() < 1e-10, "edge {k}: {a} vs {b}");
        }
    }
}

#[test]
fn absent_everywhere_uses_tokens_and_stays_finite() {
    let mut w = toy_window(3, 2, 7);
    for n in &mut w.graph.nodes {
        for m in n.det.modalities.values_mut() {
            m.present = false;
        }
    }
    let mut params = ModelParams::new(small_config(Fusion::Attention, 2)).unwrap();
    randomize(&mut params, 13);
    let a = forward(&w.graph, &w.frame_knn, &params, None).unwrap();
    let b = forward(&w.graph, &w.frame_knn, &params, None).unwrap();
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite()));
}

#[test]
fn framewise_gat_special_cases() {
    let w = toy_window(1, 4, 8);
    let mut params = ModelParams::new(small_config(Fusion::Attention, 1)).unwrap();
    randomize(&mut params, 14);
    let lonely = FrameKnnGraph { neighbors: vec![vec![]; 4] };
    let inputs = GraphInputs::new(&w.graph, &lonely, &params).unwrap();
    let mut tape = Tape::new();
    let mut st = encode_initial(&mut tape, &params, &inputs).unwrap();
    let h = tape.value(st.nodes).clone();
    framewise_gat(&mut tape, &params, &inputs, &mut st).unwrap();
    let theta = params.store.get(params.gat.theta);
    let expect = h.matmul(theta).unwrap();
    assert!(tape.value(st.nodes).max_abs_diff(&expect) < 1e-14);

    *params.store.get_mut(params.gat.attn_target) = Tensor::zeros(6, 1);
    *params.store.get_mut(params.gat.attn_source) = Tensor::zeros(6, 1);
    let full = FrameKnnGraph {
        neighbors: (0..4).map(|j| (0..4).filter(|&i| i != j).collect()).collect(),
    };
    let inputs = GraphInputs::new(&w.graph, &full, &params).unwrap();
    let mut tape = Tape::new();
    let mut st = encode_initial(&mut tape, &params, &inputs).unwrap();
    let h = tape.value(st.nodes).clone();
    framewise_gat(&mut tape, &params, &inputs, &mut st).unwrap();
    let th = h.matmul(params.store.get(params.gat.theta)).unwrap();
    for j in 0..4 {
        for c in 0..6 {
            let mean = (0..4).map(|r| th.get(r, c)).sum::<f64>() / 4.0;
            assert!((tape.value(st.nodes).get(j, c) - mean).abs() < 1e-14);
        }
    }
}

#[test]
fn isolated_node_gets_combiner_of_zeros() {
    let w = toy_window(1, 2, 9);
    let params = ModelParams::new(small_config(Fusion::Attention, 1)).unwrap();
    let inputs = GraphInputs::new(&w.graph, &w.frame_knn, &params).unwrap();
    let mut tape = Tape::new();
    let mut st = encode_initial(&mut tape, &params, &inputs).unwrap();
    st.attended = Some(cross_edge_modality_attention(&mut tape, &params, &inputs).unwrap());
    edge_update(&mut tape, &params, &inputs, &mut st).unwrap();
    node_update_time_aware(&mut tape, &params, &inputs, &mut st).unwrap();
    let expect = mlp_forward(&params.node_mlp, &params.store, &Tensor::zeros(1, 12), None).unwrap();
    for j in 0..2 {
        assert_eq!(tape.value(st.nodes).row(j), expect.data());
    }
}

#[test]
fn edge_storage_order_does_not_change_scores() {
    let w = toy_window(4, 3, 10);
    let mut params = ModelParams::new(small_config(Fusion::Attention, 3)).unwrap();
    randomize(&mut params, 15);
    let base = forward(&w.graph, &w.frame_knn, &params, None).unwrap();
    let mut shuffled = w.graph.clone();
    shuffled.edges.reverse();
    let rev = forward(&shuffled, &w.frame_knn, &params, None).unwrap();
    let m = base.len();
    for k in 0..m {
        assert!((base[k] - rev[m - 1 - k]).abs() < 1e-12);
    }
}

#[test]
fn twin_edges_update_identically() {
    let mut w = toy_window(2, 2, 16);
    let dup = w.graph.edges[0].clone();
    w.graph.edges.push(dup);
    let params = ModelParams::new(small_config(Fusion::Attention, 1)).unwrap();
    let inputs = GraphInputs::new(&w.graph, &w.frame_knn, &params).unwrap();
    let mut tape = Tape::new();
    let mut st = encode_initial(&mut tape, &params, &inputs).unwrap();
    st.attended = Some(cross_edge_modality_attention(&mut tape, &params, &inputs).unwrap());
    edge_update(&mut tape, &params, &inputs, &mut st).unwrap();
    let e = tape.value(st.edges);
    assert_eq!(e.row(0), e.row(e.rows() - 1));
}

#[test]
fn toggling_modality_only_touches_its_component() {
    let mut w = toy_window(4, 4, 17);
    w.frame_knn = FrameKnnGraph {
        neighbors: vec![vec![]; w.graph.nodes.len()],
    };
    let mut params = ModelParams::new(small_config(Fusion::Attention, 3)).unwrap();
    randomize(&mut params, 18);
    let base = forward(&w.graph, &w.frame_knn, &params, None).unwrap();
    let target = w.graph.nodes.len() - 1;
    let class = w.graph.nodes[target].class_id();
    let mut toggled = w.graph.clone();
    toggled.nodes[target].det.modalities.get_mut(&ModalityTag::Lidar).unwrap().present = false;
    let after = forward(&toggled, &w.frame_knn, &params, None).unwrap();
    assert!(after.iter().all(|v| v.is_finite()));
    let mut changed = false;
    for (k, e) in w.graph.edges.iter().enumerate() {
        if w.graph.nodes[e.dst].class_id() != class {
            assert_eq!(base[k], after[k]);
        } else if e.dst == target || e.src == target {
            changed |= base[k] != after[k];
        }
    }
    assert!(changed);
}

#[test]
fn loss_gradient_matches_finite_differences() {
    let w = toy_window(3, 2, 19);
    assert_eq!(w.graph.nodes.len(), 6);
    for fusion in [Fusion::Attention, Fusion::NodeStack] {
        let mut params = ModelParams::new(small_config(fusion, 2)).unwrap();
        randomize(&mut params, 20);
        let win = TrainingWindow::new(&w, &params, &[3, 5], 0.8).unwrap();
        let shell = params.clone();
        let report = finite_difference_check(&params.store, 1e-5, |store, tape| {
            let mut p = shell.clone();
            p.store = store.clone();
            let s = forward_traced(tape, &p, &win.inputs)?;
            class_balanced_loss(tape, s, &win.labels, &win.weights)
        })
        .unwrap();
        assert!(report.checked > report.skipped);
        assert!(report.max_rel_err < 1e-4, "{fusion:?}: {report:?}");
    }
}

#[test]
fn loss_examples() {
    assert_eq!(class_balanced_loss_value(&[], &[], &[], &[1], 0.8).unwrap(), 0.0);
    let l = class_balanced_loss_value(&[1.0, 0.0], &[1.0, 0.0], &[0, 0], &[2], 0.8).unwrap();
    assert!(l.abs() < 1e-12);
    let l = class_balanced_loss_value(&[0.5], &[1.0], &[0], &[1], 0.8).unwrap();
    assert!((l - 2f64.ln()).abs() < 1e-15);
}

fn train_set(params: &ModelParams) -> Vec<TrainingWindow> {
    vec![TrainingWindow::new(&toy_window(3, 3, 21), params, &[4, 4], 0.8).unwrap()]
}

#[test]
fn zero_lr_keeps_parameters() {
    let mut params = ModelParams::new(small_config(Fusion::Attention, 1)).unwrap();
    let before = params.store.clone();
    let data = train_set(&params);
    let cfg = TrainConfig {
        epochs: 3,
        lr: 0.0,
        ..TrainConfig::default()
    };
    let trace = train_toy(&mut params, &data, &cfg).unwrap();
    assert_eq!(params.store, before);
    assert!(trace.iter().all(|&l| l == trace[0]));
}

#[test]
fn training_reduces_loss_and_is_repeatable() {
    let cfg = TrainConfig {
        epochs: 200,
        lr: 0.01,
        ..TrainConfig::default()
    };
    let run = || {
        let mut params = ModelParams::new(small_config(Fusion::Attention, 1)).unwrap();
        let data = train_set(&params);
        train_toy(&mut params, &data, &cfg).unwrap()
    };
    let a = run();
    assert!(a.last().unwrap() < &a[0]);
    assert_eq!(a, run());
}

#[test]
fn empty_training_set_rejected() {
    let mut params = ModelParams::new(small_config(Fusion::Attention, 1)).unwrap();
    assert!(train_toy(&mut params, &[], &TrainConfig::default()).is_err());
}
