use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::hungarian::hungarian_assign;
use crate::error::{Error, Result};
use crate::geometry::{center_distance_xy, Box3D};
use crate::track::TrajectorySet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchGate {
    /// Pairs match only below this BEV center distance (meters).
    pub max_distance: f64,
    pub class_equal: bool,
}

impl Default for MatchGate {
    fn default() -> Self {
        Self {
            max_distance: 2.0,
            class_equal: true,
        }
    }
}

impl MatchGate {
    pub fn validate(&self) -> Result<()> {
        if !(self.max_distance > 0.0 && self.max_distance.is_finite()) {
            return Err(Error::InvalidArgument(format!("gate distance {} must be positive", self.max_distance)));
        }
        Ok(())
    }

    fn distance(&self, p: &FrameObject, g: &FrameObject) -> Option<f64> {
        if self.class_equal && p.class_id != g.class_id {
            return None;
        }
        let d = center_distance_xy(&p.bbox, &g.bbox);
        (d < self.max_distance).then_some(d)
    }
}

/// One box of one track in one frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameObject {
    pub track_id: u64,
    pub class_id: usize,
    pub bbox: Box3D,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct FrameMatch {
    /// `(pred index, gt index, distance)`.
    pub matches: Vec<(usize, usize, f64)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
}

/// Matches one frame. Pairs carried over from `previous` (GT track id to
/// predicted track id) are kept while they pass the gate; the rest is
/// solved by minimum total center distance among gate-passing pairs.
pub fn match_frame(preds: &[FrameObject], gts: &[FrameObject], gate: &MatchGate, previous: &HashMap<u64, u64>) -> Result<FrameMatch> {
    gate.validate()?;
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    let mut matches = Vec::new();
    for (gi, g) in gts.iter().enumerate() {
        let Some(&pid) = previous.get(&g.track_id) else { continue };
        let Some(pi) = preds.iter().position(|p| p.track_id == pid) else { continue };
        if pred_used[pi] {
            continue;
        }
        if let Some(d) = gate.distance(&preds[pi], g) {
            pred_used[pi] = true;
            gt_used[gi] = true;
            matches.push((pi, gi, d));
        }
    }
    let free_p: Vec<usize> = (0..preds.len()).filter(|&k| !pred_used[k]).collect();
    let free_g: Vec<usize> = (0..gts.len()).filter(|&k| !gt_used[k]).collect();
    if !free_p.is_empty() && !free_g.is_empty() {
        // Any invalid pair costs more than every valid assignment combined,
        // so the solver maximizes the number of valid matches first.
        let sentinel = gate.max_distance * (free_p.len().min(free_g.len()) as f64 + 1.0) * 10.0;
        let dist: Vec<Vec<Option<f64>>> = free_p
            .iter()
            .map(|&p| free_g.iter().map(|&g| gate.distance(&preds[p], &gts[g])).collect())
            .collect();
        let cost: Vec<Vec<f64>> = dist.iter().map(|r| r.iter().map(|d| d.unwrap_or(sentinel)).collect()).collect();
        for (r, c) in hungarian_assign(&cost)? {
            if let Some(d) = dist[r][c] {
                pred_used[free_p[r]] = true;
                gt_used[free_g[c]] = true;
                matches.push((free_p[r], free_g[c], d));
            }
        }
    }
    matches.sort_by_key(|m| (m.1, m.0));
    Ok(FrameMatch {
        matches,
        unmatched_preds: (0..preds.len()).filter(|&k| !pred_used[k]).collect(),
        unmatched_gts: (0..gts.len()).filter(|&k| !gt_used[k]).collect(),
    })
}

/// Raw CLEAR-MOT counters; additive across scenes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ClearCounts {
    pub gt: usize,
    pub matches: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub ids: usize,
    pub frag: usize,
    pub distance_sum: f64,
}

impl ClearCounts {
    pub fn add(&mut self, o: &ClearCounts) {
        self.gt += o.gt;
        self.matches += o.matches;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.ids += o.ids;
        self.frag += o.frag;
        self.distance_sum += o.distance_sum;
    }

    pub fn mota(&self) -> Result<f64> {
        if self.gt == 0 {
            return Err(Error::Undefined("MOTA needs at least one ground-truth state".into()));
        }
        Ok(1.0 - (self.fp + self.fn_ + self.ids) as f64 / self.gt as f64)
    }

    pub fn recall(&self) -> Result<f64> {
        if self.gt == 0 {
            return Err(Error::Undefined("recall needs at least one ground-truth state".into()));
        }
        Ok(self.matches as f64 / self.gt as f64)
    }

    /// Mean matched center distance; `None` without matches.
    pub fn motp(&self) -> Option<f64> {
        (self.matches > 0).then(|| self.distance_sum / self.matches as f64)
    }
}

/// Counters plus the number of matched states of every predicted track.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClearDetail {
    pub counts: ClearCounts,
    pub matched_states: BTreeMap<u64, usize>,
}

impl ClearDetail {
    /// Predicted tracks that never matched any GT state.
    pub fn fp_tracks(&self) -> usize {
        self.matched_states.values().filter(|&&n| n == 0).count()
    }
}

fn by_frame(ts: &TrajectorySet, keep: &dyn Fn(u64, usize) -> bool) -> BTreeMap<usize, Vec<FrameObject>> {
    let mut out: BTreeMap<usize, Vec<FrameObject>> = BTreeMap::new();
    for t in ts.tracks.iter().filter(|t| keep(t.track_id, t.class_id)) {
        for s in &t.states {
            out.entry(s.frame_index).or_default().push(FrameObject {
                track_id: t.track_id,
                class_id: t.class_id,
                bbox: s.bbox,
            });
        }
    }
    out
}

/// CLEAR-MOT accounting restricted to predicted tracks and GT tracks
/// accepted by the two filters.
pub fn clear_mot_filtered(
    pred: &TrajectorySet,
    gt: &TrajectorySet,
    gate: &MatchGate,
    keep_pred: &dyn Fn(u64, usize) -> bool,
    keep_gt: &dyn Fn(u64, usize) -> bool,
) -> Result<ClearDetail> {
    pred.validate()?;
    gt.validate()?;
    let pf = by_frame(pred, keep_pred);
    let gf = by_frame(gt, keep_gt);
    let mut detail = ClearDetail::default();
    for t in pred.tracks.iter().filter(|t| keep_pred(t.track_id, t.class_id)) {
        detail.matched_states.insert(t.track_id, 0);
    }
    let last = pf.keys().chain(gf.keys()).max().copied();
    let Some(last) = last else { return Ok(detail) };
    let empty = Vec::new();
    let mut prev_match: HashMap<u64, u64> = HashMap::new();
    // GT ids that were matched earlier and are currently in an unmatched run.
    let mut was_matched: HashMap<u64, bool> = HashMap::new();
    let mut interrupted: HashMap<u64, bool> = HashMap::new();
    let c = &mut detail.counts;
    for frame in 0..=last {
        let preds = pf.get(&frame).unwrap_or(&empty);
        let gts = gf.get(&frame).unwrap_or(&empty);
        let m = match_frame(preds, gts, gate, &prev_match)?;
        c.gt += gts.len();
        c.fp += m.unmatched_preds.len();
        c.fn_ += m.unmatched_gts.len();
        c.matches += m.matches.len();
        let mut cur = HashMap::with_capacity(m.matches.len());
        for &(pi, gi, d) in &m.matches {
            let (gid, pid) = (gts[gi].track_id, preds[pi].track_id);
            c.distance_sum += d;
            if prev_match.get(&gid).is_some_and(|&old| old != pid) {
                c.ids += 1;
            }
            if interrupted.get(&gid).copied().unwrap_or(false) {
                c.frag += 1;
                interrupted.insert(gid, false);
            }
            was_matched.insert(gid, true);
            *detail.matched_states.get_mut(&pid).expect("pred track") += 1;
            cur.insert(gid, pid);
        }
        for &gi in &m.unmatched_gts {
            let gid = gts[gi].track_id;
            if was_matched.get(&gid).copied().unwrap_or(false) {
                interrupted.insert(gid, true);
            }
        }
        prev_match = cur;
    }
    Ok(detail)
}

pub fn clear_mot(pred: &TrajectorySet, gt: &TrajectorySet, gate: &MatchGate) -> Result<ClearDetail> {
    clear_mot_filtered(pred, gt, gate, &|_, _| true, &|_, _| true)
}
