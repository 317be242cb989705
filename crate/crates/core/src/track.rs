use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Detection3D;
use crate::geometry::Box3D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackState {
    pub frame_index: usize,
    pub bbox: Box3D,
    pub velocity: [f64; 2],
    pub score: f64,
}

impl From<&Detection3D> for TrackState {
    fn from(d: &Detection3D) -> Self {
        Self {
            frame_index: d.frame_index,
            bbox: d.bbox,
            velocity: d.velocity,
            score: d.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub track_id: u64,
    pub class_id: usize,
    pub states: Vec<TrackState>,
}

impl Trajectory {
    pub fn validate(&self) -> Result<()> {
        if let Some(w) = self.states.windows(2).find(|w| w[0].frame_index >= w[1].frame_index) {
            return Err(Error::State(format!(
                "track {} has frame {} after {}",
                self.track_id, w[1].frame_index, w[0].frame_index
            )));
        }
        Ok(())
    }

    pub fn first_frame(&self) -> Option<usize> {
        self.states.first().map(|s| s.frame_index)
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.states.last().map(|s| s.frame_index)
    }

    /// Mean detection score, used to rank tracks in the recall sweep.
    pub fn confidence(&self) -> f64 {
        if self.states.is_empty() {
            return 0.0;
        }
        self.states.iter().map(|s| s.score).sum::<f64>() / self.states.len() as f64
    }

    pub fn state_at(&self, frame: usize) -> Option<&TrackState> {
        self.states
            .binary_search_by_key(&frame, |s| s.frame_index)
            .ok()
            .map(|k| &self.states[k])
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrajectorySet {
    pub tracks: Vec<Trajectory>,
}

impl TrajectorySet {
    pub fn new(tracks: Vec<Trajectory>) -> Self {
        Self { tracks }
    }

    pub fn len(&self) -> usize {
        self.tracks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tracks.is_empty()
    }

    pub fn num_states(&self) -> usize {
        self.tracks.iter().map(|t| t.states.len()).sum()
    }

    /// Per-track ordering plus unique track ids.
    pub fn validate(&self) -> Result<()> {
        let mut ids = std::collections::HashSet::new();
        for t in &self.tracks {
            t.validate()?;
            if !ids.insert(t.track_id) {
                return Err(Error::State(format!("duplicate track id {}", t.track_id)));
            }
        }
        Ok(())
    }

    pub fn num_frames(&self) -> usize {
        self.tracks.iter().filter_map(Trajectory::last_frame).map(|f| f + 1).max().unwrap_or(0)
    }
}
