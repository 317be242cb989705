//! Scene-level orchestration: windows, edge scoring, clustering,
//! refinement, evaluation and confidence.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cluster::{cluster_scene, ClusterConfig};
use crate::confidence::SceneConfidence;
use crate::error::{Error, Result};
use crate::features::Detection3D;
use crate::gnn::{forward, ModelConfig, ModelParams, TrainConfig, TrainingWindow};
use crate::graph::{apply_gt_assignment, build_scene_graphs, global_node_ids, label_edges, match_detections_to_gt, GraphConfig, GtBox};
use crate::metrics::{average_precision, evaluate, EvalScene, MatchGate, MetricsReport, RECALL_POINTS};
use crate::postproc::{refine, PostprocConfig};
use crate::track::TrajectorySet;

/// Detections of one scene, optionally with ground truth.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub detections: Vec<Vec<Detection3D>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<TrajectorySet>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub graph: GraphConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub cluster: ClusterConfig,
    /// Skip refinement entirely when false.
    pub postprocess: bool,
    pub postproc: PostprocConfig,
    pub gate: MatchGate,
    pub recall_points: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            graph: GraphConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            cluster: ClusterConfig::default(),
            postprocess: true,
            postproc: PostprocConfig::default(),
            gate: MatchGate::default(),
            recall_points: RECALL_POINTS,
        }
    }
}

fn unit(name: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} = {v} must lie in [0, 1]")))
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let g = &self.graph;
        if g.num_classes != self.model.num_classes {
            return Err(Error::Config(format!(
                "graph has {} classes but the model {}",
                g.num_classes, self.model.num_classes
            )));
        }
        if g.window_len < 2 || g.stride == 0 {
            return Err(Error::Config("window_len must be at least 2 and stride at least 1".into()));
        }
        let c = &self.cluster;
        unit("theta_min", c.theta_min)?;
        unit("theta_join", c.theta_join)?;
        unit("singleton_min_score", c.singleton_min_score)?;
        unit("still_iou_min", self.postproc.still_iou_min)?;
        unit("join_iou_min", self.postproc.join_iou_min)?;
        if !(0.0..1.0).contains(&self.train.beta) {
            return Err(Error::Config(format!("beta {} must lie in [0, 1)", self.train.beta)));
        }
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be non-negative", self.train.lr)));
        }
        if self.recall_points == 0 {
            return Err(Error::Config("recall_points must be positive".into()));
        }
        self.gate.validate().map_err(|e| Error::Config(e.to_string()))
    }

    /// Errors unless `params` was built with this configuration's model
    /// hyperparameters (the initialization seed may differ).
    pub fn check_weights(&self, params: &ModelParams) -> Result<()> {
        let want = ModelConfig {
            seed: params.config.seed,
            ..self.model.clone()
        };
        if want != params.config {
            return Err(Error::Config(format!(
                "weights were trained with {:?}, configuration asks for {:?}",
                params.config, self.model
            )));
        }
        Ok(())
    }
}

/// Per-window edge scores of one scene in scene-level node ids.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SceneScores {
    pub windows: Vec<Vec<(usize, usize, f64)>>,
}

/// Scores every window of a scene.
pub fn score_scene(params: &ModelParams, detections: &[Vec<Detection3D>], graph: &GraphConfig) -> Result<SceneScores> {
    let windows = build_scene_graphs(detections, graph)?;
    let windows = windows
        .par_iter()
        .map(|w| {
            let scores = forward(&w.graph, &w.frame_knn, params, None)?;
            Ok(w.graph
                .edges
                .iter()
                .zip(scores)
                .map(|(e, s)| (w.graph.nodes[e.src].global_id, w.graph.nodes[e.dst].global_id, s))
                .collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneScores { windows })
}

/// Scene-level id to detection.
pub fn scene_nodes(detections: &[Vec<Detection3D>]) -> BTreeMap<usize, Detection3D> {
    let ids = global_node_ids(detections);
    ids.iter()
        .zip(detections)
        .flat_map(|(i, d)| i.iter().copied().zip(d.iter().cloned()))
        .collect()
}

/// Clusters averaged window scores into tracks and optionally refines them.
pub fn tracks_from_scores(detections: &[Vec<Detection3D>], scores: &SceneScores, cfg: &PipelineConfig) -> Result<TrajectorySet> {
    let tracks = cluster_scene(&scores.windows, &scene_nodes(detections), &cfg.cluster)?;
    if cfg.postprocess {
        refine(&tracks, &cfg.postproc)
    } else {
        Ok(tracks)
    }
}

pub fn scene_confidence(scores: &SceneScores) -> Result<SceneConfidence> {
    let batches: Vec<Vec<f64>> = scores.windows.iter().map(|w| w.iter().map(|e| e.2).collect()).collect();
    SceneConfidence::from_batches(batches.iter().map(|b| b.as_slice()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneOutput {
    pub id: String,
    pub tracks: TrajectorySet,
    pub confidence: SceneConfidence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineOutput {
    pub scenes: Vec<SceneOutput>,
    /// Present when at least one scene carries ground-truth states.
    pub report: Option<MetricsReport>,
}

pub fn track_scene(params: &ModelParams, scene: &Scene, cfg: &PipelineConfig) -> Result<SceneOutput> {
    let scores = score_scene(params, &scene.detections, &cfg.graph)?;
    Ok(SceneOutput {
        id: scene.id.clone(),
        tracks: tracks_from_scores(&scene.detections, &scores, cfg)?,
        confidence: scene_confidence(&scores)?,
    })
}

/// Evaluates the scenes that have ground truth; `None` when no scene has
/// any ground-truth state.
pub fn evaluate_outputs(scenes: &[Scene], outputs: &[SceneOutput], cfg: &PipelineConfig) -> Result<Option<MetricsReport>> {
    let eval: Vec<EvalScene> = scenes
        .iter()
        .zip(outputs)
        .filter_map(|(s, o)| {
            s.gt.as_ref().map(|gt| EvalScene {
                pred: o.tracks.clone(),
                gt: gt.clone(),
            })
        })
        .collect();
    if eval.iter().all(|e| e.gt.num_states() == 0) {
        return Ok(None);
    }
    evaluate(&eval, &cfg.gate, cfg.recall_points).map(Some)
}

/// The full inference path over a batch of scenes, which are processed in
/// parallel and reported in input order.
pub fn run_pipeline(cfg: &PipelineConfig, scenes: &[Scene], params: &ModelParams) -> Result<PipelineOutput> {
    cfg.validate()?;
    cfg.check_weights(params)?;
    let outputs = scenes
        .par_iter()
        .map(|s| track_scene(params, s, cfg))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate_outputs(scenes, &outputs, cfg)?;
    Ok(PipelineOutput { scenes: outputs, report })
}

/// Detections with `gt_instance` filled in. Detections that already carry
/// instances are kept as they are; otherwise they are matched against the
/// scene's ground truth within `radius` meters.
pub fn labeled_detections(scene: &Scene, radius: f64) -> Result<Vec<Vec<Detection3D>>> {
    if scene.detections.iter().flatten().any(|d| d.gt_instance.is_some()) {
        return Ok(scene.detections.clone());
    }
    let gt = scene
        .gt
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("scene {:?} has neither instance ids nor ground truth", scene.id)))?;
    let mut annotations = vec![Vec::new(); scene.detections.len()];
    for t in &gt.tracks {
        for s in &t.states {
            if let Some(frame) = annotations.get_mut(s.frame_index) {
                frame.push(GtBox {
                    instance: t.track_id,
                    class_id: t.class_id,
                    bbox: s.bbox,
                });
            }
        }
    }
    let assignment = match_detections_to_gt(&scene.detections, &annotations, radius, GT_MATCH_IOU)?;
    let mut dets = scene.detections.clone();
    apply_gt_assignment(&mut dets, &assignment);
    Ok(dets)
}

/// Minimum BEV IoU for a detection to inherit a ground-truth id.
pub const GT_MATCH_IOU: f64 = 0.1;

/// Instances per class over the scenes' ground truth, floored at one so
/// that classes seen only as clutter still get a finite weight.
pub fn class_counts(scenes: &[Scene], num_classes: usize) -> Vec<usize> {
    let mut counts = vec![0; num_classes];
    for t in scenes.iter().filter_map(|s| s.gt.as_ref()).flat_map(|g| &g.tracks) {
        if let Some(c) = counts.get_mut(t.class_id) {
            *c += 1;
        }
    }
    counts.into_iter().map(|c| c.max(1)).collect()
}

/// Labeled windows of detections that carry `gt_instance`.
pub fn training_windows(
    params: &ModelParams,
    scenes: &[Vec<Vec<Detection3D>>],
    graph: &GraphConfig,
    counts: &[usize],
    beta: f64,
) -> Result<Vec<TrainingWindow>> {
    let per_scene = scenes
        .par_iter()
        .map(|dets| {
            let mut windows = build_scene_graphs(dets, graph)?;
            windows
                .iter_mut()
                .map(|w| {
                    label_edges(&mut w.graph);
                    TrainingWindow::new(w, params, counts, beta)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}

/// Trains `params` on labeled scenes; returns the per-epoch mean loss.
pub fn train_on_scenes(params: &mut ModelParams, scenes: &[Vec<Vec<Detection3D>>], graph: &GraphConfig, counts: &[usize], train: &TrainConfig) -> Result<Vec<f64>> {
    let windows = training_windows(params, scenes, graph, counts, train.beta)?;
    crate::gnn::train_toy(params, &windows, train)
}

/// Edge scores and labels over every window of labeled scenes.
pub fn edge_predictions(params: &ModelParams, scenes: &[Vec<Vec<Detection3D>>], graph: &GraphConfig) -> Result<(Vec<f64>, Vec<bool>)> {
    let per_scene = scenes
        .par_iter()
        .map(|dets| {
            let mut scores = Vec::new();
            let mut labels = Vec::new();
            for mut w in build_scene_graphs(dets, graph)? {
                label_edges(&mut w.graph);
                scores.extend(forward(&w.graph, &w.frame_knn, params, None)?);
                labels.extend(w.graph.edges.iter().map(|e| e.label == Some(1)));
            }
            Ok((scores, labels))
        })
        .collect::<Result<Vec<_>>>()?;
    let (mut scores, mut labels) = (Vec::new(), Vec::new());
    for (s, l) in per_scene {
        scores.extend(s);
        labels.extend(l);
    }
    Ok((scores, labels))
}

/// Average precision of the edge classifier on labeled scenes.
pub fn edge_average_precision(params: &ModelParams, scenes: &[Vec<Vec<Detection3D>>], graph: &GraphConfig) -> Result<f64> {
    let (scores, labels) = edge_predictions(params, scenes, graph)?;
    average_precision(&scores, &labels)
}
