//! Parameter counting and the encoder-only sparsity convention.

use super::config::ModelConfig;
use super::gates::{ComponentKind, ComponentWeights, GateSet};
use crate::error::{Error, Result};
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub embedding: usize,
    pub encoder: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn embedding_share(&self) -> f64 {
        self.embedding as f64 / self.total as f64
    }
}

/// Parameters that survive compaction under hard `gates`.
///
/// Embedding: `v·r + r·d + S·d` for `r` active ranks. Per layer, with `k`
/// active heads of width `dh` and `m` active hidden units:
/// `4·d·k·dh + 3·k·dh + d` (attention), `2·d·m + m + d` (FFN), `4·d` (norms).
pub fn count_params(config: &ModelConfig, gates: &GateSet) -> Result<ParamCount> {
    gates.require_hard("parameter counting")?;
    if gates.dims() != config.gate_dims() {
        return Err(Error::Contract(format!(
            "gate dims {:?} do not match config {:?}",
            gates.dims(),
            config.gate_dims()
        )));
    }
    let d = config.model_dim;
    let dh = config.head_dim();
    let on = |g: &[f64]| g.iter().filter(|&&x| x == 1.0).count();
    let r = on(gates.embed_gates());
    let embedding = config.vocab_size * r + r * d + config.max_seq_len * d;
    let mut encoder = 0;
    for l in 0..config.n_layers {
        let kd = on(gates.head_gates(l)) * dh;
        let m = on(gates.hidden_gates(l));
        encoder += 4 * d * kd + 3 * kd + d;
        encoder += 2 * d * m + m + d;
        encoder += 4 * d;
    }
    Ok(ParamCount { embedding, encoder, total: embedding + encoder })
}

/// `1 − (active head/hidden weight)/(total head/hidden weight)`; embedding
/// ranks do not enter.
pub fn encoder_sparsity(gates: &GateSet, weights: &ComponentWeights) -> f64 {
    let dims = gates.dims();
    let mut kept = 0.0;
    for (id, &g) in dims.components().zip(gates.values()) {
        if id.kind != ComponentKind::EmbedRank {
            kept += weights.weight(id.kind) * g;
        }
    }
    (1.0 - kept / weights.encoder_total(dims)).clamp(0.0, 1.0)
}

/// Sparsity over every gated component, embedding ranks included.
pub fn total_sparsity(gates: &GateSet, weights: &ComponentWeights) -> f64 {
    let dims = gates.dims();
    let kept: f64 = dims.components().zip(gates.values()).map(|(id, &g)| weights.weight(id.kind) * g).sum();
    (1.0 - kept / weights.total(dims)).clamp(0.0, 1.0)
}
