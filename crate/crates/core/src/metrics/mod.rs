//! CLEAR-MOT accounting, the AMOTA recall sweep, and edge-level average
//! precision.

mod clear;
mod hungarian;
mod sweep;

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use clear::{clear_mot, clear_mot_filtered, match_frame, ClearCounts, ClearDetail, FrameMatch, FrameObject, MatchGate};
pub use hungarian::{assignment_cost, hungarian_assign};
pub use sweep::{amota_sweep, EvalScene, SweepPoint, RECALL_POINTS};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub class_id: usize,
    pub counts: ClearCounts,
    pub mota: f64,
    pub motp: Option<f64>,
    pub recall: f64,
    pub amota: f64,
    pub amotp: f64,
    pub sweep: Vec<SweepPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverallReport {
    pub counts: ClearCounts,
    pub mota: f64,
    pub motp: Option<f64>,
    pub recall: f64,
    /// Mean over the classes present in the ground truth.
    pub amota: f64,
    pub amotp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassReport>,
    pub overall: OverallReport,
}

fn class_report(scenes: &[EvalScene], gate: &MatchGate, class_id: usize, points: usize) -> Result<ClassReport> {
    let mut counts = ClearCounts::default();
    for s in scenes {
        let d = clear_mot_filtered(&s.pred, &s.gt, gate, &|_, c| c == class_id, &|_, c| c == class_id)?;
        counts.add(&d.counts);
    }
    let (amota, amotp, sweep) = amota_sweep(scenes, gate, Some(class_id), points)?;
    Ok(ClassReport {
        class_id,
        counts,
        mota: counts.mota()?,
        motp: counts.motp(),
        recall: counts.recall()?,
        amota,
        amotp,
        sweep,
    })
}

/// Full evaluation over scenes; classes are those present in the ground
/// truth and are evaluated in parallel.
pub fn evaluate(scenes: &[EvalScene], gate: &MatchGate, recall_points: usize) -> Result<MetricsReport> {
    gate.validate()?;
    let classes: BTreeSet<usize> = scenes.iter().flat_map(|s| s.gt.tracks.iter().filter(|t| !t.states.is_empty()).map(|t| t.class_id)).collect();
    if classes.is_empty() {
        return Err(Error::Undefined("no ground-truth states to evaluate against".into()));
    }
    let per_class = classes
        .into_par_iter()
        .map(|c| class_report(scenes, gate, c, recall_points))
        .collect::<Result<Vec<_>>>()?;
    let mut counts = ClearCounts::default();
    for s in scenes {
        counts.add(&clear_mot(&s.pred, &s.gt, gate)?.counts);
    }
    let n = per_class.len() as f64;
    let overall = OverallReport {
        counts,
        mota: counts.mota()?,
        motp: counts.motp(),
        recall: counts.recall()?,
        amota: per_class.iter().map(|c| c.amota).sum::<f64>() / n,
        amotp: per_class.iter().map(|c| c.amotp).sum::<f64>() / n,
    };
    Ok(MetricsReport { per_class, overall })
}

/// Highest reachable recall over all classes with every track kept.
pub fn max_recall(scenes: &[EvalScene], gate: &MatchGate) -> Result<f64> {
    let mut counts = ClearCounts::default();
    for s in scenes {
        counts.add(&clear_mot(&s.pred, &s.gt, gate)?.counts);
    }
    counts.recall()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FpTracksAtRecall {
    pub threshold: f64,
    pub recall: f64,
    /// Kept tracks that never match a ground-truth state.
    pub fp_tracks: usize,
    pub kept_tracks: usize,
}

/// Tracks kept by the highest confidence cut whose overall recall reaches
/// `target`, and how many of them are pure false positives. `None` when
/// the target is unreachable.
pub fn fp_tracks_at_recall(scenes: &[EvalScene], gate: &MatchGate, target: f64) -> Result<Option<FpTracksAtRecall>> {
    let mut sw = sweep::Sweeper::new(scenes, *gate, None);
    let Some(idx) = sw.first_reaching(target)? else { return Ok(None) };
    let (c, fp_tracks) = sw.at(idx)?;
    let tau = sw.thresholds[idx];
    let kept_tracks = scenes.iter().flat_map(|s| &s.pred.tracks).filter(|t| t.confidence() >= tau).count();
    Ok(Some(FpTracksAtRecall {
        threshold: tau,
        recall: c.recall()?,
        fp_tracks,
        kept_tracks,
    }))
}

/// Step-wise average precision: `Σ (R_k - R_{k-1}) P_k` over distinct
/// score thresholds in descending order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 {
        return Err(Error::Undefined("average precision needs at least one positive".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    let mut k = 0;
    while k < order.len() {
        let s = scores[order[k]];
        while k < order.len() && scores[order[k]] == s {
            if labels[order[k]] {
                tp += 1;
            } else {
                fp += 1;
            }
            k += 1;
        }
        let recall = tp as f64 / positives as f64;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    Ok(ap)
}
