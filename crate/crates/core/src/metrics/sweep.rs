use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::clear::{clear_mot_filtered, ClearCounts, MatchGate};
use crate::error::{Error, Result};
use crate::track::TrajectorySet;

pub const RECALL_POINTS: usize = 40;

/// Predicted and ground-truth tracks of one scene.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalScene {
    pub pred: TrajectorySet,
    pub gt: TrajectorySet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub recall_target: f64,
    /// Confidence cut that reached the target, if any did.
    pub threshold: Option<f64>,
    pub recall: f64,
    pub motar: f64,
    pub motp: f64,
}

/// Counters over all scenes for the predicted tracks of `class` (all
/// classes when `None`) whose confidence is at least `threshold`.
#[derive(Debug)]
pub(crate) struct Sweeper<'a> {
    scenes: &'a [EvalScene],
    gate: MatchGate,
    class: Option<usize>,
    confidences: Vec<HashMap<u64, f64>>,
    /// Distinct confidences, descending.
    pub thresholds: Vec<f64>,
    memo: HashMap<usize, (ClearCounts, usize)>,
}

impl<'a> Sweeper<'a> {
    pub fn new(scenes: &'a [EvalScene], gate: MatchGate, class: Option<usize>) -> Self {
        let in_class = |c: usize| class.is_none_or(|k| k == c);
        let confidences: Vec<HashMap<u64, f64>> = scenes
            .iter()
            .map(|s| {
                s.pred
                    .tracks
                    .iter()
                    .filter(|t| in_class(t.class_id))
                    .map(|t| (t.track_id, t.confidence()))
                    .collect()
            })
            .collect();
        let mut thresholds: Vec<f64> = confidences.iter().flat_map(|m| m.values().copied()).collect();
        thresholds.sort_by(|a, b| b.total_cmp(a));
        thresholds.dedup();
        Self {
            scenes,
            gate,
            class,
            confidences,
            thresholds,
            memo: HashMap::new(),
        }
    }

    pub fn gt_count(&self) -> usize {
        let in_class = |c: usize| self.class.is_none_or(|k| k == c);
        self.scenes
            .iter()
            .flat_map(|s| &s.gt.tracks)
            .filter(|t| in_class(t.class_id))
            .map(|t| t.states.len())
            .sum()
    }

    /// Counters and FP-track count with every track at or above
    /// `thresholds[k]`.
    pub fn at(&mut self, k: usize) -> Result<(ClearCounts, usize)> {
        if let Some(v) = self.memo.get(&k) {
            return Ok(*v);
        }
        let tau = self.thresholds[k];
        let class = self.class;
        let mut total = ClearCounts::default();
        let mut fp_tracks = 0;
        for (scene, conf) in self.scenes.iter().zip(&self.confidences) {
            let keep_pred = |id: u64, _c: usize| conf.get(&id).is_some_and(|&v| v >= tau);
            let keep_gt = |_id: u64, c: usize| class.is_none_or(|k| k == c);
            let d = clear_mot_filtered(&scene.pred, &scene.gt, &self.gate, &keep_pred, &keep_gt)?;
            total.add(&d.counts);
            fp_tracks += d.fp_tracks();
        }
        self.memo.insert(k, (total, fp_tracks));
        Ok((total, fp_tracks))
    }

    fn recall_at(&mut self, k: usize) -> Result<f64> {
        self.at(k)?.0.recall()
    }

    /// Index of the highest threshold whose recall reaches `target`, by
    /// bisection over the (essentially monotone) recall curve.
    pub fn first_reaching(&mut self, target: f64) -> Result<Option<usize>> {
        let n = self.thresholds.len();
        if n == 0 || self.recall_at(n - 1)? < target {
            return Ok(None);
        }
        let (mut lo, mut hi) = (0, n - 1);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if self.recall_at(mid)? >= target {
                hi = mid;
            } else {
                lo = mid + 1;
            }
        }
        Ok(Some(lo))
    }
}

/// `max(0, 1 - (IDS + FP + FN - (1 - r) P) / (r P))`, capped at 1.
fn motar(c: &ClearCounts, r: f64, p: usize) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let p = p as f64;
    let errors = (c.ids + c.fp + c.fn_) as f64 - (1.0 - r) * p;
    (1.0 - errors / (r * p)).clamp(0.0, 1.0)
}

/// nuScenes-style averaged MOTA over `points` evenly spaced recall targets
/// (`RECALL_POINTS` by convention). At each target the highest confidence cut reaching it is used;
/// MOTAR is evaluated at the recall that cut actually achieves.
pub fn amota_sweep(scenes: &[EvalScene], gate: &MatchGate, class: Option<usize>, points: usize) -> Result<(f64, f64, Vec<SweepPoint>)> {
    if points == 0 {
        return Err(Error::InvalidArgument("the recall sweep needs at least one point".into()));
    }
    let mut sw = Sweeper::new(scenes, *gate, class);
    let p = sw.gt_count();
    if p == 0 {
        return Err(Error::Undefined("AMOTA needs at least one ground-truth state".into()));
    }
    let n_points = points;
    let mut points = Vec::with_capacity(n_points);
    for k in 1..=n_points {
        let target = k as f64 / n_points as f64;
        let point = match sw.first_reaching(target - 1e-12)? {
            Some(idx) => {
                let (c, _) = sw.at(idx)?;
                let r = c.recall()?;
                SweepPoint {
                    recall_target: target,
                    threshold: Some(sw.thresholds[idx]),
                    recall: r,
                    motar: motar(&c, r, p),
                    motp: c.motp().unwrap_or(gate.max_distance),
                }
            }
            None => SweepPoint {
                recall_target: target,
                threshold: None,
                recall: 0.0,
                motar: 0.0,
                motp: gate.max_distance,
            },
        };
        points.push(point);
    }
    let amota = points.iter().map(|s| s.motar).sum::<f64>() / n_points as f64;
    let amotp = points.iter().map(|s| s.motp).sum::<f64>() / n_points as f64;
    Ok((amota, amotp, points))
}
