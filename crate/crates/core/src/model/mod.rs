//! Toy multimodal model: patch encoder, adapter, causal decoder.

mod config;
mod forward;
mod hidden;
mod weights;

pub use config::{ModelConfig, NormKind, FFN_MULT};
pub use forward::{encoder_layer_states, forward_capture, forward_capture_per_layer, patchify, ModelInput};
pub use hidden::HiddenStack;
pub use weights::{
    init_weights, load_weights, make_reference_smoothing_weights, save_weights, tensor_shapes, WeightStore,
    SUPPRESS_BIAS,
};
