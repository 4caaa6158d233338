//! The hybrid stack: config and layer selection, weights, the forward pass
//! with per-layer caches, greedy generation and the weight manifest.

mod config;
mod forward;
pub mod manifest;
mod weights;

pub use config::{select_layers, LayerKind, Layout, ModelConfig, DEFAULT_CHUNK_SIZE, DEFAULT_NORM_EPS, DEFAULT_SPARSE_RATIO};
pub use forward::{
    attention_residual, embed, ffn, generate, hidden_states, layer_forward, layer_forward_traced, logits, model_forward,
    model_forward_traced, ForwardTrace, Generation, HybridCache, LayerCache, Phase,
};
pub use weights::{tensor_layout, LayerWeights, ModelWeights};
