//! Node (pose-and-motion) and raw edge feature construction.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{center_distance_3d, signed_yaw_diff, Box3D};

/// Number of non-class entries in the pose-and-motion vector.
pub const NODE_BASE_DIM: usize = 11;
pub const EDGE_DIM: usize = 5;

pub const DEFAULT_LIDAR_DIM: usize = 128;
pub const DEFAULT_CAMERA_DIM: usize = 64;
pub const DEFAULT_RADAR_DIM: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ModalityTag {
    #[serde(rename = "camera-2D-A")]
    Camera,
    #[serde(rename = "lidar-3D-A")]
    Lidar,
    #[serde(rename = "radar-3D-R")]
    Radar,
}

impl ModalityTag {
    pub const ALL: [ModalityTag; 3] = [ModalityTag::Camera, ModalityTag::Lidar, ModalityTag::Radar];

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityTag::Camera => "camera-2D-A",
            ModalityTag::Lidar => "lidar-3D-A",
            ModalityTag::Radar => "radar-3D-R",
        }
    }

    pub fn default_dim(self) -> usize {
        match self {
            ModalityTag::Camera => DEFAULT_CAMERA_DIM,
            ModalityTag::Lidar => DEFAULT_LIDAR_DIM,
            ModalityTag::Radar => DEFAULT_RADAR_DIM,
        }
    }
}

impl fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModalityTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModalityTag::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown modality tag {s:?}")))
    }
}

/// Precomputed per-detection sensor embedding. When `present` is false the
/// vector is a zero placeholder and must be ignored.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityEmbedding {
    pub tag: ModalityTag,
    pub present: bool,
    pub vector: Vec<f64>,
}

impl ModalityEmbedding {
    pub fn present(tag: ModalityTag, vector: Vec<f64>) -> Self {
        Self {
            tag,
            present: true,
            vector,
        }
    }

    pub fn absent(tag: ModalityTag, dim: usize) -> Self {
        Self {
            tag,
            present: false,
            vector: vec![0.0; dim],
        }
    }
}

/// One 3D box observation in one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection3D {
    pub bbox: Box3D,
    /// `(v_x, v_y)` in m/s, ego-relative.
    pub velocity: [f64; 2],
    pub class_id: usize,
    pub score: f64,
    /// Seconds, relative to the scene start.
    pub timestamp: f64,
    pub frame_index: usize,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub modalities: BTreeMap<ModalityTag, ModalityEmbedding>,
    /// Ground-truth instance, set by GT matching.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_instance: Option<u64>,
}

impl Detection3D {
    pub fn new(bbox: Box3D, velocity: [f64; 2], class_id: usize, score: f64, frame_index: usize, timestamp: f64) -> Self {
        Self {
            bbox,
            velocity,
            class_id,
            score,
            timestamp,
            frame_index,
            modalities: BTreeMap::new(),
            gt_instance: None,
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        self.bbox.validate()?;
        if self.class_id >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "class_id {} out of range for {} classes",
                self.class_id, num_classes
            )));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidArgument(format!("score {} not in [0, 1]", self.score)));
        }
        if !self.velocity.iter().all(|v| v.is_finite()) || !self.timestamp.is_finite() {
            return Err(Error::InvalidArgument("non-finite velocity or timestamp".into()));
        }
        Ok(())
    }

    /// The embedding for `tag` if it is present.
    pub fn embedding(&self, tag: ModalityTag) -> Option<&[f64]> {
        self.modalities
            .get(&tag)
            .filter(|m| m.present)
            .map(|m| m.vector.as_slice())
    }
}

/// Pose-and-motion node vector `[x, y, z, w, l, h, yaw, v_x, v_y, one-hot(c), S, t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeFeature(pub Vec<f64>);

impl NodeFeature {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// `[Δx, Δv, Δγ, Δs, Δt]` for a time-forward edge.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeFeatureRaw(pub [f64; EDGE_DIM]);

impl EdgeFeatureRaw {
    pub fn dist(&self) -> f64 {
        self.0[0]
    }
    pub fn vel_diff(&self) -> f64 {
        self.0[1]
    }
    pub fn yaw_diff(&self) -> f64 {
        self.0[2]
    }
    pub fn log_volume_ratio(&self) -> f64 {
        self.0[3]
    }
    pub fn dt(&self) -> f64 {
        self.0[4]
    }
}

pub fn node_feature_dim(num_classes: usize) -> usize {
    NODE_BASE_DIM + num_classes
}

pub fn encode_node_3dpm(det: &Detection3D, num_classes: usize) -> Result<NodeFeature> {
    if det.class_id >= num_classes {
        return Err(Error::InvalidArgument(format!(
            "class_id {} out of range for {} classes",
            det.class_id, num_classes
        )));
    }
    let b = &det.bbox;
    let mut v = Vec::with_capacity(node_feature_dim(num_classes));
    v.extend_from_slice(&b.center);
    v.extend_from_slice(&b.size);
    v.push(b.yaw);
    v.extend_from_slice(&det.velocity);
    v.extend((0..num_classes).map(|c| if c == det.class_id { 1.0 } else { 0.0 }));
    v.push(det.score);
    v.push(det.timestamp);
    Ok(NodeFeature(v))
}

/// Raw features of the edge from the earlier detection `det_j` to the later `det_i`.
///
/// `Δv` is the norm of the velocity difference vector.
pub fn encode_edge_raw(det_j: &Detection3D, det_i: &Detection3D) -> Result<EdgeFeatureRaw> {
    if !(det_j.timestamp < det_i.timestamp) {
        return Err(Error::Precondition(format!(
            "edge must point forward in time (t_j = {}, t_i = {})",
            det_j.timestamp, det_i.timestamp
        )));
    }
    let dx = center_distance_3d(&det_j.bbox, &det_i.bbox);
    let dv = (det_j.velocity[0] - det_i.velocity[0]).hypot(det_j.velocity[1] - det_i.velocity[1]);
    let dyaw = signed_yaw_diff(det_j.bbox.yaw, det_i.bbox.yaw)?;
    let ds = (det_j.bbox.volume() / det_i.bbox.volume()).ln();
    let dt = det_i.timestamp - det_j.timestamp;
    Ok(EdgeFeatureRaw([dx, dv, dyaw, ds, dt]))
}
