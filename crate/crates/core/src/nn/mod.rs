//! Minimal tensor/autodiff core and the classification network: early CNN,
//! patch embedding, single-head transformer blocks, classifier head, Adam
//! with step decay, and the checkpoint container.

pub mod adam;
pub mod checkpoint;
pub mod model;
pub mod scalar;
pub mod tape;

pub use adam::{adam_step, learning_rate, AdamState, BASE_LR};
pub use checkpoint::CheckpointMeta;
pub use model::{
    argmax_low, build_forward, softmax_f64, update_running_stats, ForwardGraph, ForwardOutput,
    ModelConfig, ModelParams,
};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, TensorId, PROB_CLAMP};
