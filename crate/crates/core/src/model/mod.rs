//! Decoupled scale-wise autoregressive model: embeddings, stacked
//! attention/scan layers, the scale-wise loss, and the sampler.

mod config;
mod forward;
mod params;
mod sampler;

pub use config::{default_heads, LayerMode, ModelConfig};
pub use forward::{
    backward, block_input, build_input_sequence, eval_loss, forward, forward_block,
    forward_cached, loss, streaming_logits, ForwardCache, LossOutput, StreamState,
};
pub use params::{LayerParams, ModelParams};
pub use sampler::{
    candidate_seed, generate, generate_with_rejection, sample_token, ClassColorScorer, Sampling,
    Scorer,
};
