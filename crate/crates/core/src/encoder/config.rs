use super::gates::GateDims;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// Shape of a gated encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl ModelConfig {
    /// The base-size multilingual encoder used for parameter accounting:
    /// 12 layers, 12 heads, 768 wide, 3072 hidden, 250002 tokens, 514 positions.
    pub fn xlmr_base() -> Self {
        ModelConfig {
            n_layers: 12,
            n_heads: 12,
            model_dim: 768,
            ffn_dim: 3072,
            vocab_size: 250_002,
            max_seq_len: 514,
            dropout: 0.0,
        }
    }

    /// Desk-scale default: 2 layers, 4 heads, 64 wide, 128 hidden. Narrower
    /// models (head width 8) fail to pick up the bigram structure of the
    /// synthetic corpus within a few thousand steps.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            n_layers: 2,
            n_heads: 4,
            model_dim: 64,
            ffn_dim: 128,
            vocab_size,
            max_seq_len: 16,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }

    pub fn gate_dims(&self) -> GateDims {
        GateDims {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            ffn_dim: self.ffn_dim,
            model_dim: self.model_dim,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_indivisible_heads() {
        let mut c = ModelConfig::toy(10);
        c.n_heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        c.n_heads = 4;
        c.ffn_dim = 0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::xlmr_base().validate().is_ok());
    }
}
