//! Dense tensors, a reverse-mode tape, and the layers built on top of it.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use layers::{mlp_forward, multihead_attention, AttentionHead, Linear, MhaParams, Mlp};
pub use optim::Sgd;
pub use params::{glorot_uniform, Gradients, ParamId, ParamStore};
pub use tape::{sigmoid, softmax_rows, Activation, Tape, Var};
pub use tensor::Tensor;
