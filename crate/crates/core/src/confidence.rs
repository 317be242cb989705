//! Entropy of edge-score distributions as a tracking-uncertainty signal.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized Shannon entropy of scores treated as a distribution over
/// edges: `-Σ z ln z / ln |E|`. Zero for at most one edge or all-zero scores.
pub fn batch_entropy(scores: &[f64]) -> Result<f64> {
    if let Some(bad) = scores.iter().find(|&&s| !(s >= 0.0 && s.is_finite())) {
        return Err(Error::InvalidArgument(format!("edge score {bad} must be finite and non-negative")));
    }
    let total: f64 = scores.iter().sum();
    if scores.len() <= 1 || total == 0.0 {
        return Ok(0.0);
    }
    let h: f64 = scores
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let z = s / total;
            -z * z.ln()
        })
        .sum();
    // Adding +0 turns the -0 of a degenerate batch into 0.
    Ok((h / (scores.len() as f64).ln()).clamp(0.0, 1.0) + 0.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfidence {
    pub batch_entropies: Vec<f64>,
    /// Mean of the batch entropies (0 for a scene without batches).
    pub scene_entropy: f64,
}

impl SceneConfidence {
    pub fn from_batches<'a>(batches: impl IntoIterator<Item = &'a [f64]>) -> Result<Self> {
        let batch_entropies = batches.into_iter().map(batch_entropy).collect::<Result<Vec<_>>>()?;
        let scene_entropy = if batch_entropies.is_empty() {
            0.0
        } else {
            batch_entropies.iter().sum::<f64>() / batch_entropies.len() as f64
        };
        Ok(Self {
            batch_entropies,
            scene_entropy,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterDirection {
    #[default]
    AboveMean,
    BelowMean,
}

/// Scenes strictly on the chosen side of the mean scene entropy.
pub fn filter_scenes(scene_entropies: &BTreeMap<String, f64>, direction: FilterDirection) -> BTreeSet<String> {
    if scene_entropies.is_empty() {
        return BTreeSet::new();
    }
    let mean = scene_entropies.values().sum::<f64>() / scene_entropies.len() as f64;
    scene_entropies
        .iter()
        .filter(|(_, &h)| match direction {
            FilterDirection::AboveMean => h > mean,
            FilterDirection::BelowMean => h < mean,
        })
        .map(|(k, _)| k.clone())
        .collect()
}
