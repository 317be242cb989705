use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{node_feature_dim, ModalityTag, EDGE_DIM};
use crate::nn::{Activation, MhaParams, Mlp, ParamId, ParamStore, Tensor};

/// How sensor embeddings enter the network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Fusion {
    /// Pose-and-motion features only.
    None,
    /// Cross-edge attention between the two endpoints' embeddings.
    #[default]
    Attention,
    /// Embeddings (plus presence flags) appended to the node input.
    NodeStack,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub tag: ModalityTag,
    pub dim: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub hidden: usize,
    pub depth: usize,
    pub heads: usize,
    /// Each embedding of width `d` is split into this many tokens of width
    /// `d / modality_tokens` for attention.
    pub modality_tokens: usize,
    pub fusion: Fusion,
    pub modalities: Vec<ModalitySpec>,
    pub gat_slope: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 7,
            hidden: 64,
            depth: 6,
            heads: 2,
            modality_tokens: 4,
            fusion: Fusion::Attention,
            modalities: ModalityTag::ALL
                .into_iter()
                .map(|tag| ModalitySpec { tag, dim: tag.default_dim() })
                .collect(),
            gat_slope: 0.2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.num_classes == 0 || self.hidden == 0 || self.heads == 0 || self.modality_tokens == 0 {
            return bad("num_classes, hidden, heads and modality_tokens must be positive".into());
        }
        for (k, m) in self.modalities.iter().enumerate() {
            if m.dim == 0 || m.dim % self.modality_tokens != 0 {
                return bad(format!("{} width {} is not a positive multiple of {} tokens", m.tag, m.dim, self.modality_tokens));
            }
            if self.modalities[..k].iter().any(|o| o.tag == m.tag) {
                return bad(format!("modality {} listed twice", m.tag));
            }
        }
        if !(self.gat_slope.is_finite() && self.gat_slope >= 0.0) {
            return bad(format!("gat_slope {} must be finite and non-negative", self.gat_slope));
        }
        Ok(())
    }

    /// Modalities that contribute to the network under the current fusion.
    pub fn active_modalities(&self) -> &[ModalitySpec] {
        match self.fusion {
            Fusion::None => &[],
            _ => &self.modalities,
        }
    }

    pub fn node_input_dim(&self) -> usize {
        let base = node_feature_dim(self.num_classes);
        match self.fusion {
            Fusion::NodeStack => base + self.modalities.iter().map(|m| m.dim + 1).sum::<usize>(),
            _ => base,
        }
    }

    pub fn token_width(&self, m: &ModalitySpec) -> usize {
        m.dim / self.modality_tokens
    }

    fn attention_input_dim(&self) -> usize {
        let attended: usize = match self.fusion {
            Fusion::Attention => self.modalities.iter().map(|m| 2 * m.dim).sum(),
            _ => 0,
        };
        attended + EDGE_DIM
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModalityAttention {
    pub spec: ModalitySpec,
    pub mha: MhaParams,
    /// `1 x dim` learned stand-in for an absent embedding.
    pub absent_token: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GatParams {
    pub theta: ParamId,
    pub proj: ParamId,
    /// Weights on the projected embedding of the node being updated.
    pub attn_target: ParamId,
    /// Weights on the projected embedding of the attended neighbor.
    pub attn_source: ParamId,
}

/// Every learnable weight of the edge-classification network.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub node_encoder: Mlp,
    pub edge_encoder: Mlp,
    pub attention: Vec<ModalityAttention>,
    pub attended_edge_encoder: Mlp,
    pub edge_mlp: Mlp,
    pub past_mlp: Mlp,
    pub future_mlp: Mlp,
    pub node_mlp: Mlp,
    pub gat: GatParams,
    pub classifier: Mlp,
}

impl ModelParams {
    /// Fresh weights drawn from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let d = config.hidden;
        let relu = Activation::Relu;
        let node_encoder = Mlp::new(&mut store, "node_encoder", &[config.node_input_dim(), d, d], relu, relu, &mut rng)?;
        let edge_encoder = Mlp::new(&mut store, "edge_encoder", &[EDGE_DIM, d, d], relu, relu, &mut rng)?;
        let mut attention = Vec::new();
        if config.fusion == Fusion::Attention {
            for spec in &config.modalities {
                let tw = config.token_width(spec);
                let name = format!("attention.{}", spec.tag);
                let mha = MhaParams::new(&mut store, &name, tw, tw, config.heads, tw, &mut rng)?;
                let absent_token = store.add(format!("{name}.absent"), Tensor::zeros(1, spec.dim));
                attention.push(ModalityAttention {
                    spec: *spec,
                    mha,
                    absent_token,
                });
            }
        }
        let attended_edge_encoder = Mlp::new(&mut store, "attended_edge_encoder", &[config.attention_input_dim(), d, d], relu, relu, &mut rng)?;
        let edge_mlp = Mlp::new(&mut store, "edge_mlp", &[4 * d, d, d], relu, relu, &mut rng)?;
        let past_mlp = Mlp::new(&mut store, "past_mlp", &[3 * d, d, d], relu, relu, &mut rng)?;
        let future_mlp = Mlp::new(&mut store, "future_mlp", &[3 * d, d, d], relu, relu, &mut rng)?;
        let node_mlp = Mlp::new(&mut store, "node_mlp", &[2 * d, d, d], relu, relu, &mut rng)?;
        let gat = GatParams {
            theta: store.add_glorot("gat.theta", d, d, &mut rng),
            proj: store.add_glorot("gat.proj", d, d, &mut rng),
            attn_target: store.add_glorot("gat.attn_target", d, 1, &mut rng),
            attn_source: store.add_glorot("gat.attn_source", d, 1, &mut rng),
        };
        let classifier = Mlp::new(&mut store, "classifier", &[d, d, 1], relu, Activation::Sigmoid, &mut rng)?;
        Ok(Self {
            config,
            store,
            node_encoder,
            edge_encoder,
            attention,
            attended_edge_encoder,
            edge_mlp,
            past_mlp,
            future_mlp,
            node_mlp,
            gat,
            classifier,
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }
}

/// `L_CB` weight `(1 - beta) / (1 - beta^n)` for a category seen `n` times.
pub fn class_weight(beta: f64, count: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&beta) {
        return Err(Error::InvalidArgument(format!("beta {beta} not in [0, 1)")));
    }
    if count == 0 {
        return Err(Error::InvalidArgument("category count must be positive".into()));
    }
    if beta == 0.0 {
        return Ok(1.0);
    }
    Ok((1.0 - beta) / (1.0 - beta.powi(count.min(i32::MAX as usize) as i32)))
}
