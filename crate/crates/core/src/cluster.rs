//! Window-score averaging and score-ordered agglomerative trajectory
//! clustering.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Detection3D;
use crate::track::{TrackState, Trajectory, TrajectorySet};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredEdge {
    /// Earlier endpoint (global node id).
    pub src: usize,
    /// Later endpoint (global node id).
    pub dst: usize,
    pub score: f64,
    pub windows: usize,
}

/// One averaged entry per directed node pair, sorted by `(src, dst)`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoredEdgeSet {
    pub edges: Vec<ScoredEdge>,
}

/// Per-window `(src, dst, score)` predictions averaged per edge. Sums are
/// accumulated in window order, so the result does not depend on how the
/// windows were scheduled.
pub fn average_overlapping_scores(window_predictions: &[Vec<(usize, usize, f64)>]) -> ScoredEdgeSet {
    let mut acc: BTreeMap<(usize, usize), (f64, usize)> = BTreeMap::new();
    for window in window_predictions {
        for &(src, dst, score) in window {
            let e = acc.entry((src, dst)).or_insert((0.0, 0));
            e.0 += score;
            e.1 += 1;
        }
    }
    ScoredEdgeSet {
        edges: acc
            .into_iter()
            .map(|((src, dst), (sum, n))| ScoredEdge {
                src,
                dst,
                score: sum / n as f64,
                windows: n,
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ClusterSet {
    /// Cluster id to its time-ordered node list.
    pub clusters: BTreeMap<usize, Vec<usize>>,
    /// Node id to the id of the cluster holding it.
    pub visited: BTreeMap<usize, usize>,
}

impl ClusterSet {
    pub fn is_leading(&self, node: usize) -> bool {
        self.visited.get(&node).is_some_and(|c| self.clusters[c].first() == Some(&node))
    }

    pub fn is_trailing(&self, node: usize) -> bool {
        self.visited.get(&node).is_some_and(|c| self.clusters[c].last() == Some(&node))
    }

    /// Consecutive node pairs of every cluster, i.e. the accepted links.
    pub fn links(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self.clusters.values().flat_map(|c| c.windows(2).map(|w| (w[0], w[1]))).collect();
        out.sort_unstable();
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterConfig {
    pub theta_min: f64,
    pub theta_join: f64,
    pub singleton_min_score: f64,
}

impl Default for ClusterConfig {
    fn default() -> Self {
        Self {
            theta_min: 0.1,
            theta_join: 0.5,
            singleton_min_score: 0.5,
        }
    }
}

/// Greedy clustering over edges in descending score order. An edge may
/// start a cluster, extend one at either end, or join a trailing node to a
/// leading node of another cluster when its score reaches `theta_join`.
pub fn agglomerate(scored: &ScoredEdgeSet, theta_min: f64, theta_join: f64) -> ClusterSet {
    let mut order: Vec<&ScoredEdge> = scored.edges.iter().filter(|e| e.score >= theta_min).collect();
    order.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(Ordering::Equal)
            .then((a.src, a.dst).cmp(&(b.src, b.dst)))
    });
    let mut cs = ClusterSet::default();
    let mut next_id = 0;
    for e in order {
        let (j, i) = (e.src, e.dst);
        match (cs.visited.get(&j).copied(), cs.visited.get(&i).copied()) {
            (None, None) => {
                cs.clusters.insert(next_id, vec![j, i]);
                cs.visited.insert(j, next_id);
                cs.visited.insert(i, next_id);
                next_id += 1;
            }
            (None, Some(ci)) => {
                if cs.is_leading(i) {
                    cs.clusters.get_mut(&ci).expect("cluster").insert(0, j);
                    cs.visited.insert(j, ci);
                }
            }
            (Some(cj), None) => {
                if cs.is_trailing(j) {
                    cs.clusters.get_mut(&cj).expect("cluster").push(i);
                    cs.visited.insert(i, cj);
                }
            }
            (Some(cj), Some(ci)) => {
                if cj != ci && e.score >= theta_join && cs.is_trailing(j) && cs.is_leading(i) {
                    let tail = cs.clusters.remove(&ci).expect("cluster");
                    for &n in &tail {
                        cs.visited.insert(n, cj);
                    }
                    cs.clusters.get_mut(&cj).expect("cluster").extend(tail);
                }
            }
        }
    }
    cs
}

/// Turns clusters into tracks, then adds every unclustered detection whose
/// score reaches `singleton_min_score` as a one-state track. Track ids run
/// from 0: clusters in cluster-id order, then singletons in node order.
pub fn finalize_trajectories(clusters: &ClusterSet, nodes: &BTreeMap<usize, Detection3D>, singleton_min_score: f64) -> Result<TrajectorySet> {
    let lookup = |n: usize| nodes.get(&n).ok_or_else(|| Error::InvalidArgument(format!("cluster refers to unknown node {n}")));
    let mut tracks = Vec::new();
    for members in clusters.clusters.values() {
        let dets = members.iter().map(|&n| lookup(n)).collect::<Result<Vec<_>>>()?;
        tracks.push(Trajectory {
            track_id: tracks.len() as u64,
            class_id: dets[0].class_id,
            states: dets.iter().map(|d| TrackState::from(*d)).collect(),
        });
    }
    for (&n, det) in nodes {
        if !clusters.visited.contains_key(&n) && det.score >= singleton_min_score {
            tracks.push(Trajectory {
                track_id: tracks.len() as u64,
                class_id: det.class_id,
                states: vec![TrackState::from(det)],
            });
        }
    }
    let set = TrajectorySet::new(tracks);
    set.validate()?;
    Ok(set)
}

/// Averaging, clustering and track emission in one call.
pub fn cluster_scene(
    window_predictions: &[Vec<(usize, usize, f64)>],
    nodes: &BTreeMap<usize, Detection3D>,
    cfg: &ClusterConfig,
) -> Result<TrajectorySet> {
    let scored = average_overlapping_scores(window_predictions);
    let cs = agglomerate(&scored, cfg.theta_min, cfg.theta_join);
    finalize_trajectories(&cs, nodes, cfg.singleton_min_score)
}
