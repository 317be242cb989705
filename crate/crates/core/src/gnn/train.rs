use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::forward::{forward_traced, GraphInputs};
use super::model::{class_weight, ModelParams};
use crate::error::{Error, Result};
use crate::graph::WindowGraph;
use crate::nn::{Sgd, Tape, Tensor, Var};

/// Records `L_CB` for a score column: the mean over edges of
/// `weight * BCE(score, label)`.
pub fn class_balanced_loss(tape: &mut Tape, scores: Var, labels: &[f64], weights: &[f64]) -> Result<Var> {
    tape.weighted_bce(scores, labels, weights)
}

/// Eager `L_CB` with weights derived from per-category object counts.
pub fn class_balanced_loss_value(scores: &[f64], labels: &[f64], categories: &[usize], counts: &[usize], beta: f64) -> Result<f64> {
    let weights = edge_weights(categories, counts, beta)?;
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::column(scores.to_vec()))?;
    let l = class_balanced_loss(&mut tape, p, labels, &weights)?;
    Ok(tape.value(l).data()[0])
}

pub fn edge_weights(categories: &[usize], counts: &[usize], beta: f64) -> Result<Vec<f64>> {
    categories
        .iter()
        .map(|&c| {
            let n = *counts
                .get(c)
                .ok_or_else(|| Error::InvalidArgument(format!("no object count for category {c}")))?;
            class_weight(beta, n)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub beta: f64,
    /// Rescale the gradient to this L2 norm when it is exceeded.
    pub clip_norm: Option<f64>,
    /// Seed of the per-epoch window shuffle.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 1e-4,
            momentum: 0.9,
            beta: 0.8,
            clip_norm: None,
            seed: 0,
        }
    }
}

/// Precomputed inputs, labels and loss weights of one labeled window.
#[derive(Debug, Clone)]
pub struct TrainingWindow {
    pub inputs: GraphInputs,
    pub labels: Vec<f64>,
    pub weights: Vec<f64>,
}

impl TrainingWindow {
    pub fn new(window: &WindowGraph, params: &ModelParams, counts: &[usize], beta: f64) -> Result<Self> {
        let labels = window
            .graph
            .labels()
            .ok_or_else(|| Error::InvalidArgument("training window has unlabeled edges".into()))?;
        let categories: Vec<usize> = window.graph.edges.iter().map(|e| window.graph.nodes[e.dst].class_id()).collect();
        Ok(Self {
            inputs: GraphInputs::new(&window.graph, &window.frame_knn, params)?,
            labels,
            weights: edge_weights(&categories, counts, beta)?,
        })
    }
}

/// Loss and gradients of one window.
pub fn window_loss(params: &ModelParams, w: &TrainingWindow) -> Result<(f64, crate::nn::Gradients)> {
    let mut tape = Tape::new();
    let scores = forward_traced(&mut tape, params, &w.inputs)?;
    let loss = class_balanced_loss(&mut tape, scores, &w.labels, &w.weights)?;
    let grads = tape.backward(loss, &params.store)?;
    Ok((tape.value(loss).data()[0], grads))
}

/// Per-window SGD over `epochs` passes; returns the mean loss of each epoch.
pub fn train_toy(params: &mut ModelParams, windows: &[TrainingWindow], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut opt = Sgd::new(&params.store, cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &k in &order {
            let (loss, mut grads) = window_loss(params, &windows[k]).map_err(|e| match e {
                Error::NonFinite(op) => Error::Training {
                    epoch,
                    detail: format!("non-finite value in {op}"),
                },
                other => other,
            })?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    detail: "loss is not finite".into(),
                });
            }
            if let Some(max) = cfg.clip_norm {
                let norm = grads.l2_norm();
                if norm > max {
                    grads.scale(max / norm);
                }
            }
            opt.step(&mut params.store, &grads)?;
            total += loss;
        }
        trace.push(total / windows.len() as f64);
    }
    Ok(trace)
}
