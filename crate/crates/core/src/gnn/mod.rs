//! Edge-classification network: encoders, cross-edge modality attention,
//! time-aware message passing, frame-wise graph attention and the
//! class-balanced training loss.

mod forward;
mod model;
mod train;

pub use forward::{
    classify_edges, cross_edge_modality_attention, edge_update, encode_initial, forward, forward_traced, framewise_gat,
    node_update_time_aware, GraphInputs, ModalityInputs, MpState,
};
pub use model::{class_weight, Fusion, GatParams, ModalityAttention, ModalitySpec, ModelConfig, ModelParams};
pub use train::{class_balanced_loss, class_balanced_loss_value, edge_weights, train_toy, window_loss, TrainConfig, TrainingWindow};

#[cfg(test)]
mod tests;
