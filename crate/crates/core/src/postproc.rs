//! Track refinement: gap filling, yaw-flip repair and joining for still
//! objects, and center smoothing.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{bev_iou, signed_yaw_diff, wrap_angle, Box3D};
use crate::track::{TrackState, Trajectory, TrajectorySet};

fn lerp(a: f64, b: f64, s: f64) -> f64 {
    a + (b - a) * s
}

/// Fills every missing frame between two states by linear interpolation;
/// yaw follows the shorter arc.
pub fn interpolate_gaps(t: &Trajectory) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(t.states.len());
    for (k, s) in t.states.iter().enumerate() {
        if let Some(next) = t.states.get(k + 1) {
            states.push(*s);
            let gap = next.frame_index - s.frame_index;
            let dyaw = signed_yaw_diff(next.bbox.yaw, s.bbox.yaw)?;
            for step in 1..gap {
                let f = step as f64 / gap as f64;
                let mix = |a: [f64; 3], b: [f64; 3]| [lerp(a[0], b[0], f), lerp(a[1], b[1], f), lerp(a[2], b[2], f)];
                states.push(TrackState {
                    frame_index: s.frame_index + step,
                    bbox: Box3D {
                        center: mix(s.bbox.center, next.bbox.center),
                        size: mix(s.bbox.size, next.bbox.size),
                        yaw: wrap_angle(s.bbox.yaw + f * dyaw)?,
                    },
                    velocity: [lerp(s.velocity[0], next.velocity[0], f), lerp(s.velocity[1], next.velocity[1], f)],
                    score: lerp(s.score, next.score, f),
                });
            }
        } else {
            states.push(*s);
        }
    }
    Ok(Trajectory { states, ..t.clone() })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairScheme {
    /// Every unordered pair of states.
    #[default]
    AllPairs,
    /// Only temporally adjacent states.
    Consecutive,
}

/// Product of BEV-IoUs over state pairs; 1 for fewer than two states.
pub fn intra_track_bev_iou(t: &Trajectory) -> Result<f64> {
    intra_track_bev_iou_with(t, PairScheme::AllPairs)
}

pub fn intra_track_bev_iou_with(t: &Trajectory, scheme: PairScheme) -> Result<f64> {
    let s = &t.states;
    let mut prod = 1.0;
    for a in 0..s.len() {
        let partners = match scheme {
            PairScheme::AllPairs => a + 1..s.len(),
            PairScheme::Consecutive => a + 1..(a + 2).min(s.len()),
        };
        for b in partners {
            prod *= bev_iou(&s[a].bbox, &s[b].bbox)?;
            if prod == 0.0 {
                return Ok(0.0);
            }
        }
    }
    Ok(prod)
}

fn circular_mean(yaws: &[f64]) -> Result<f64> {
    if let Some(&first) = yaws.first() {
        if yaws.iter().all(|&y| y == first) {
            return wrap_angle(first);
        }
    }
    let (s, c) = yaws.iter().fold((0.0, 0.0), |(s, c), y| (s + y.sin(), c + y.cos()));
    wrap_angle(s.atan2(c))
}

fn arc(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// Yaw regimes of a still track: 2-means on the circle seeded at the first
/// yaw and its opposite. Returns the member flags of the first regime.
fn yaw_regimes(yaws: &[f64]) -> Result<Vec<bool>> {
    let mut centers = [yaws[0], yaws[0] + PI];
    let mut member = vec![true; yaws.len()];
    for _ in 0..32 {
        let next: Vec<bool> = yaws.iter().map(|&y| arc(y, centers[0]) <= arc(y, centers[1])).collect();
        let stable = next == member;
        member = next;
        for (k, c) in centers.iter_mut().enumerate() {
            let sel: Vec<f64> = yaws.iter().zip(&member).filter(|(_, &m)| m == (k == 0)).map(|(y, _)| *y).collect();
            if !sel.is_empty() {
                *c = circular_mean(&sel)?;
            }
        }
        if stable {
            break;
        }
    }
    Ok(member)
}

/// For a still track, replaces every yaw by the circular mean of the larger
/// yaw regime. Moving tracks are returned unchanged.
pub fn correct_yaw_flips(t: &Trajectory, still_iou_min: f64) -> Result<Trajectory> {
    if t.states.is_empty() || intra_track_bev_iou(t)? <= still_iou_min {
        return Ok(t.clone());
    }
    let yaws: Vec<f64> = t.states.iter().map(|s| s.bbox.yaw).collect();
    let member = yaw_regimes(&yaws)?;
    let first_count = member.iter().filter(|&&m| m).count();
    let keep_first = 2 * first_count >= member.len();
    let majority: Vec<f64> = yaws.iter().zip(&member).filter(|(_, &m)| m == keep_first).map(|(y, _)| *y).collect();
    let yaw = circular_mean(&majority)?;
    let mut out = t.clone();
    for s in &mut out.states {
        s.bbox.yaw = yaw;
    }
    Ok(out)
}

/// Box with the mean center and size and the circular-mean yaw.
pub fn mean_pose(t: &Trajectory) -> Result<Box3D> {
    if t.states.is_empty() {
        return Err(Error::InvalidArgument(format!("track {} has no states", t.track_id)));
    }
    let n = t.states.len() as f64;
    let mut center = [0.0; 3];
    let mut size = [0.0; 3];
    for s in &t.states {
        for k in 0..3 {
            center[k] += s.bbox.center[k] / n;
            size[k] += s.bbox.size[k] / n;
        }
    }
    let yaws: Vec<f64> = t.states.iter().map(|s| s.bbox.yaw).collect();
    Box3D::new(center, size, circular_mean(&yaws)?)
}

fn time_disjoint(a: &[usize], b: &[usize]) -> bool {
    let (mut x, mut y) = (0, 0);
    while x < a.len() && y < b.len() {
        match a[x].cmp(&b[y]) {
            std::cmp::Ordering::Equal => return false,
            std::cmp::Ordering::Less => x += 1,
            std::cmp::Ordering::Greater => y += 1,
        }
    }
    true
}

fn merge_pair(a: &Trajectory, b: &Trajectory) -> Trajectory {
    let (first, second) = if (a.first_frame(), a.track_id) <= (b.first_frame(), b.track_id) { (a, b) } else { (b, a) };
    let mut states: Vec<TrackState> = first.states.iter().chain(&second.states).copied().collect();
    states.sort_by_key(|s| s.frame_index);
    Trajectory {
        track_id: first.track_id,
        class_id: first.class_id,
        states,
    }
}

/// One sweep over pairs in ascending track-id order. Returns whether
/// anything merged.
fn join_pass(tracks: &mut Vec<Trajectory>, still_iou_min: f64, join_iou_min: f64) -> Result<bool> {
    tracks.sort_by_key(|t| t.track_id);
    let n = tracks.len();
    let mut still = Vec::with_capacity(n);
    let mut pose = Vec::with_capacity(n);
    for t in tracks.iter() {
        let s = !t.states.is_empty() && intra_track_bev_iou(t)? > still_iou_min;
        still.push(s);
        pose.push(if s { Some(mean_pose(t)?) } else { None });
    }
    // Union-find over track indices; a group only grows while it stays
    // time-disjoint.
    let mut parent: Vec<usize> = (0..n).collect();
    let mut frames: Vec<Vec<usize>> = tracks.iter().map(|t| t.states.iter().map(|s| s.frame_index).collect()).collect();
    fn root(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let mut merged = false;
    for a in 0..n {
        for b in a + 1..n {
            if !(still[a] && still[b]) || tracks[a].class_id != tracks[b].class_id {
                continue;
            }
            let (ra, rb) = (root(&mut parent, a), root(&mut parent, b));
            if ra == rb || !time_disjoint(&frames[ra], &frames[rb]) {
                continue;
            }
            let (pa, pb) = (pose[a].expect("still"), pose[b].expect("still"));
            if bev_iou(&pa, &pb)? > join_iou_min {
                let (keep, drop) = (ra.min(rb), ra.max(rb));
                parent[drop] = keep;
                let mut f = std::mem::take(&mut frames[drop]);
                f.extend(&frames[keep]);
                f.sort_unstable();
                frames[keep] = f;
                merged = true;
            }
        }
    }
    if !merged {
        return Ok(false);
    }
    let mut groups: std::collections::BTreeMap<usize, Trajectory> = std::collections::BTreeMap::new();
    for k in 0..n {
        let r = root(&mut parent, k);
        let t = &tracks[k];
        let next = match groups.remove(&r) {
            Some(acc) => merge_pair(&acc, t),
            None => t.clone(),
        };
        groups.insert(r, next);
    }
    *tracks = groups.into_values().collect();
    Ok(true)
}

/// Merges time-disjoint, same-class still tracks whose mean poses overlap,
/// repeating until no pair qualifies. The merged track keeps the id of the
/// member that starts first.
pub fn join_still_tracks(ts: &TrajectorySet, still_iou_min: f64, join_iou_min: f64) -> Result<TrajectorySet> {
    let mut tracks = ts.tracks.clone();
    while join_pass(&mut tracks, still_iou_min, join_iou_min)? {}
    tracks.sort_by_key(|t| t.track_id);
    Ok(TrajectorySet::new(tracks))
}

/// Convolves centers and velocities with `weights` over the state sequence;
/// taps that fall off either end are dropped and the rest renormalized.
pub fn smooth_track(t: &Trajectory, weights: &[f64]) -> Result<Trajectory> {
    let w = weights.len();
    if w.is_multiple_of(2) || weights.iter().any(|&x| !(x.is_finite() && x >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("smoothing kernel {weights:?} must be odd-length, non-negative and sum to 1")));
    }
    let half = w / 2;
    let n = t.states.len();
    let mut out = t.clone();
    for k in 0..n {
        let mut center = [0.0; 3];
        let mut vel = [0.0; 2];
        let mut norm = 0.0;
        for (tap, &wt) in weights.iter().enumerate() {
            let Some(idx) = (k + tap).checked_sub(half).filter(|&i| i < n) else { continue };
            let s = &t.states[idx];
            for c in 0..3 {
                center[c] += wt * s.bbox.center[c];
            }
            for c in 0..2 {
                vel[c] += wt * s.velocity[c];
            }
            norm += wt;
        }
        if norm > 0.0 {
            let s = &mut out.states[k];
            s.bbox.center = center.map(|v| v / norm);
            s.velocity = vel.map(|v| v / norm);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocConfig {
    pub interpolate: bool,
    pub still_iou_min: f64,
    pub join_iou_min: f64,
    pub pair_scheme: PairScheme,
    pub smoothing: Vec<f64>,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            interpolate: true,
            still_iou_min: 0.7,
            join_iou_min: 0.6,
            pair_scheme: PairScheme::AllPairs,
            smoothing: vec![0.25, 0.5, 0.25],
        }
    }
}

/// Per-track interpolation and yaw repair, still-track joining, then
/// smoothing.
pub fn refine(ts: &TrajectorySet, cfg: &PostprocConfig) -> Result<TrajectorySet> {
    let mut tracks = Vec::with_capacity(ts.len());
    for t in &ts.tracks {
        let t = if cfg.interpolate { interpolate_gaps(t)? } else { t.clone() };
        tracks.push(correct_yaw_flips(&t, cfg.still_iou_min)?);
    }
    let joined = join_still_tracks(&TrajectorySet::new(tracks), cfg.still_iou_min, cfg.join_iou_min)?;
    let mut out = Vec::with_capacity(joined.len());
    for t in &joined.tracks {
        let t = if cfg.interpolate { interpolate_gaps(t)? } else { t.clone() };
        out.push(smooth_track(&t, &cfg.smoothing)?);
    }
    Ok(TrajectorySet::new(out))
}
