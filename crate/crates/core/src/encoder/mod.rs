//! Gated transformer encoder: configuration, gates, the differentiable
//! forward pass, compaction and parameter accounting.

mod accounting;
mod compact;
mod config;
mod gates;
mod model;

pub use accounting::{count_params, encoder_sparsity, total_sparsity, ParamCount};
pub use compact::CompactEncoder;
pub use config::ModelConfig;
pub use gates::{ComponentId, ComponentKind, ComponentWeights, GateDims, GateSet};
pub use model::{
    effective_embedding, embed_forward, encode, encoder_forward, ffn_forward, masked_lm_loss, mha_forward, mlm_logits,
    mlm_loss,
    Dropout, Encoded, Encoder, EncoderVars, GateVars, LayerVars, LayerWeights, PAD_ID,
};
