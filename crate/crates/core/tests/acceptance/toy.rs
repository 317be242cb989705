//! End-to-end criteria on the synthetic toy dataset: training quality
//! against the greedy baseline, the ablation ordering, and determinism.

use std::time::{Duration, Instant};

use graphtrack::features::{Detection3D, ModalityTag};
use graphtrack::gnn::{train_toy, Fusion, ModalitySpec, ModelConfig, ModelParams, TrainConfig};
use graphtrack::graph::GraphConfig;
use graphtrack::metrics::{evaluate, fp_tracks_at_recall, max_recall, EvalScene, MatchGate, RECALL_POINTS};
use graphtrack::pipeline::{edge_average_precision, run_pipeline, training_windows, PipelineConfig, PipelineOutput, Scene};
use graphtrack::synth::{generate_scene, instance_counts, oracle_greedy_baseline, ModalityModel, SceneConfig, SyntheticScene};

use crate::Outcome;

const TRAIN_SEEDS: std::ops::Range<u64> = 0..50;
const VAL_SEEDS: std::ops::Range<u64> = 1000..1010;
const NUM_CLASSES: usize = 3;
const MODALITIES: [(ModalityTag, usize); 2] = [(ModalityTag::Camera, 16), (ModalityTag::Lidar, 32)];
const BASELINE_IOU: [f64; 3] = [0.01, 0.1, 0.3];
const AP_MIN: f64 = 0.90;
const TIME_LIMIT: Duration = Duration::from_secs(15 * 60);

fn scene_config(seed: u64) -> SceneConfig {
    let defaults = SceneConfig::default();
    SceneConfig {
        seed,
        frames: 40,
        p_fn: 0.15,
        fp_rate: 2.0,
        modalities: defaults
            .modalities
            .iter()
            .map(|m| ModalityModel {
                dim: MODALITIES.iter().find(|(tag, _)| *tag == m.tag).expect("modality").1,
                ..m.clone()
            })
            .collect(),
        ..defaults
    }
}

/// k_past is scaled to the toy scenes, which hold about a tenth of the
/// detections of a full driving scene.
fn graph_config() -> GraphConfig {
    GraphConfig {
        num_classes: NUM_CLASSES,
        k_past: 8,
        k_frame: 8,
        ..GraphConfig::default()
    }
}

fn model_config(depth: usize, fusion: Fusion) -> ModelConfig {
    ModelConfig {
        num_classes: NUM_CLASSES,
        hidden: 32,
        depth,
        heads: 2,
        modality_tokens: 4,
        fusion,
        modalities: MODALITIES.iter().map(|&(tag, dim)| ModalitySpec { tag, dim }).collect(),
        seed: 0,
        ..ModelConfig::default()
    }
}

fn train_config() -> TrainConfig {
    TrainConfig {
        epochs: 10,
        lr: 1e-2,
        clip_norm: Some(5.0),
        seed: 0,
        ..TrainConfig::default()
    }
}

pub struct Dataset {
    train: Vec<SyntheticScene>,
    val: Vec<SyntheticScene>,
}

impl Dataset {
    pub fn generate() -> Self {
        let make = |seeds: std::ops::Range<u64>| seeds.map(|s| generate_scene(&scene_config(s)).expect("scene")).collect();
        Self { train: make(TRAIN_SEEDS), val: make(VAL_SEEDS) }
    }

    fn labeled(scenes: &[SyntheticScene]) -> Vec<Vec<Vec<Detection3D>>> {
        scenes.iter().map(SyntheticScene::labeled_detections).collect()
    }

    fn val_scenes(&self) -> Vec<Scene> {
        self.val
            .iter()
            .enumerate()
            .map(|(k, s)| Scene {
                id: format!("val-{k:02}"),
                detections: s.detections.clone(),
                gt: Some(s.gt_tracks.clone()),
            })
            .collect()
    }
}

pub struct Trained {
    pub label: String,
    pub params: ModelParams,
    pub edge_ap: f64,
    pub output: PipelineOutput,
    pub amota: f64,
    pub elapsed: Duration,
}

fn pipeline_config(model: &ModelConfig) -> PipelineConfig {
    PipelineConfig {
        graph: graph_config(),
        model: model.clone(),
        ..PipelineConfig::default()
    }
}

pub fn train_and_track(data: &Dataset, depth: usize, fusion: Fusion) -> Trained {
    let start = Instant::now();
    let model = model_config(depth, fusion);
    let mut params = ModelParams::new(model.clone()).expect("model");
    let train_graph = GraphConfig { stride: 5, ..graph_config() };
    let train_cfg = train_config();
    let counts = instance_counts(&data.train, NUM_CLASSES);
    let windows = training_windows(&params, &Dataset::labeled(&data.train), &train_graph, &counts, train_cfg.beta).expect("windows");
    train_toy(&mut params, &windows, &train_cfg).expect("training");
    let edge_ap = edge_average_precision(&params, &Dataset::labeled(&data.val), &graph_config()).expect("edge AP");
    let output = run_pipeline(&pipeline_config(&model), &data.val_scenes(), &params).expect("pipeline");
    let amota = output.report.as_ref().expect("report").overall.amota;
    let trained = Trained {
        label: format!("L{depth} {fusion:?}"),
        params,
        edge_ap,
        output,
        amota,
        elapsed: start.elapsed(),
    };
    println!("       {}: edge AP {:.4}, AMOTA {:.4} ({:.0?})", trained.label, trained.edge_ap, trained.amota, trained.elapsed);
    trained
}

fn eval_scenes(data: &Dataset, tracks: impl Iterator<Item = graphtrack::track::TrajectorySet>) -> Vec<EvalScene> {
    data.val.iter().zip(tracks).map(|(s, pred)| EvalScene { pred, gt: s.gt_tracks.clone() }).collect()
}

pub fn end_to_end(data: &Dataset, full: &Trained) -> Outcome {
    let gate = MatchGate::default();
    let ours = eval_scenes(data, full.output.scenes.iter().map(|s| s.tracks.clone()));
    // Compare against the strongest of the baseline settings.
    let (best_iou, baseline, baseline_amota) = BASELINE_IOU
        .iter()
        .map(|&iou| {
            let scenes = eval_scenes(data, data.val.iter().map(|s| oracle_greedy_baseline(&s.detections, iou).expect("baseline")));
            let amota = evaluate(&scenes, &gate, RECALL_POINTS).expect("baseline metrics").overall.amota;
            (iou, scenes, amota)
        })
        .max_by(|a, b| a.2.total_cmp(&b.2))
        .expect("baseline settings");
    let recall = max_recall(&ours, &gate).unwrap().min(max_recall(&baseline, &gate).unwrap());
    let fp_ours = fp_tracks_at_recall(&ours, &gate, recall).unwrap();
    let fp_base = fp_tracks_at_recall(&baseline, &gate, recall).unwrap();
    let fewer_fp = matches!((fp_ours, fp_base), (Some(o), Some(b)) if o.fp_tracks < b.fp_tracks);
    let pass = full.edge_ap >= AP_MIN && full.amota > baseline_amota && fewer_fp && full.elapsed < TIME_LIMIT;
    Outcome::new(
        "end-to-end toy training",
        pass,
        format!(
            "edge AP {:.4} (>= {AP_MIN}), AMOTA {:.4} vs greedy baseline {:.4} (IoU {best_iou}), FP tracks at recall {:.3}: {} vs {}, {:.0?} (< 15 min)",
            full.edge_ap,
            full.amota,
            baseline_amota,
            recall,
            fp_ours.map_or("-".into(), |f| f.fp_tracks.to_string()),
            fp_base.map_or("-".into(), |f| f.fp_tracks.to_string()),
            full.elapsed
        ),
    )
}

pub fn ablation(shallow: &Trained, mid: &Trained, full: &Trained, stacked: &Trained) -> Vec<Outcome> {
    vec![
        Outcome::new(
            "ablation: message-passing depth",
            shallow.amota < mid.amota && mid.amota < full.amota,
            format!("AMOTA L0 {:.4} < L2 {:.4} < L6 {:.4}", shallow.amota, mid.amota, full.amota),
        ),
        Outcome::new(
            "ablation: stacked modalities vs attention",
            stacked.edge_ap <= full.edge_ap,
            format!("edge AP stacked {:.4} <= attention {:.4}", stacked.edge_ap, full.edge_ap),
        ),
    ]
}

fn in_pool<T: Send>(threads: usize, f: impl FnOnce() -> T + Send) -> T {
    rayon::ThreadPoolBuilder::new().num_threads(threads).build().expect("thread pool").install(f)
}

pub fn determinism(data: &Dataset, full: &Trained) -> Outcome {
    let cfg = pipeline_config(&full.params.config);
    let scenes = data.val_scenes();
    let runs: Vec<PipelineOutput> = [1, 4, 1, 3]
        .into_iter()
        .map(|t| in_pool(t, || run_pipeline(&cfg, &scenes, &full.params).expect("pipeline")))
        .collect();
    let as_json = |o: &PipelineOutput| serde_json::to_string(o).expect("json");
    let tracking_same = runs.iter().all(|r| as_json(r) == as_json(&full.output));

    // Training, including window construction, under different pools.
    let train_once = |threads| {
        in_pool(threads, || {
            let mut params = ModelParams::new(model_config(1, Fusion::Attention)).expect("model");
            let train_graph = GraphConfig { stride: 5, ..graph_config() };
            let counts = instance_counts(&data.train[..10], NUM_CLASSES);
            let windows = training_windows(&params, &Dataset::labeled(&data.train[..10]), &train_graph, &counts, 0.8).expect("windows");
            let losses = train_toy(&mut params, &windows, &TrainConfig { epochs: 2, ..train_config() }).expect("training");
            (params.store, losses)
        })
    };
    let (a, b) = (train_once(1), train_once(4));
    let training_same = a.0 == b.0 && a.1.iter().map(|l| l.to_bits()).eq(b.1.iter().map(|l| l.to_bits()));
    Outcome::new(
        "determinism",
        tracking_same && training_same,
        format!(
            "pipeline output {} across 4 runs on 1/3/4 threads; trained weights {} on 1 vs 4 threads",
            if tracking_same { "bit-identical" } else { "DIFFERS" },
            if training_same { "bit-identical" } else { "DIFFER" }
        ),
    )
}
