use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::data::Tokenizer;

/// Shape of the encoder. Positions are absolute, there are no token-type
/// embeddings and no dropout.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Matrix order; the sequence length is `n * n`.
    pub n: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub vocab_size: usize,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// `layers x heads` encoder of width `hidden` with a `4 * hidden` MLP.
    pub fn new(n: usize, layers: usize, heads: usize, hidden: usize) -> Self {
        Self {
            n,
            layers,
            heads,
            hidden,
            mlp_hidden: 4 * hidden,
            vocab_size: Tokenizer::VOCAB_SIZE,
            layer_norm_eps: 1e-12,
        }
    }

    /// 4 layers, 8 heads, width 256 on `n x n` inputs.
    pub fn paper(n: usize) -> Self {
        Self::new(n, 4, 8, 256)
    }

    pub fn seq_len(&self) -> usize {
        self.n * self.n
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |msg: String| Err(ModelError::InvalidConfig(msg));
        if self.n == 0 || self.layers == 0 || self.heads == 0 || self.hidden == 0 || self.mlp_hidden == 0 {
            return bad(format!("all dimensions must be positive: {self:?}"));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.vocab_size != Tokenizer::VOCAB_SIZE {
            return bad(format!(
                "vocab size {} does not match the tokenizer ({})",
                self.vocab_size,
                Tokenizer::VOCAB_SIZE
            ));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let d = self.hidden;
        let per_layer = 4 * (d * d + d) + 2 * d * self.mlp_hidden + self.mlp_hidden + d + 4 * d;
        self.vocab_size * d + self.seq_len() * d + 2 * d + self.layers * per_layer + d + 1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(ModelConfig::paper(7).validate().is_ok());
        assert!(ModelConfig::new(7, 4, 3, 256).validate().is_err());
        assert!(ModelConfig::new(0, 4, 8, 256).validate().is_err());
        let mut c = ModelConfig::new(5, 2, 2, 16);
        c.vocab_size = 10;
        assert!(c.validate().is_err());
    }

    #[test]
    fn sequence_length_is_n_squared() {
        assert_eq!(ModelConfig::paper(7).seq_len(), 49);
        assert_eq!(ModelConfig::paper(7).head_dim(), 32);
    }
}
