use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Column activation used inside attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum AttentionVariant {
    #[serde(rename = "softmax")]
    VanillaSoftmax,
    #[serde(rename = "softmax1")]
    Softmax1,
}

impl AttentionVariant {
    pub fn tag(self) -> &'static str {
        match self {
            AttentionVariant::VanillaSoftmax => "softmax",
            AttentionVariant::Softmax1 => "softmax1",
        }
    }

    pub fn from_tag(tag: &str) -> Option<Self> {
        match tag {
            "softmax" => Some(AttentionVariant::VanillaSoftmax),
            "softmax1" => Some(AttentionVariant::Softmax1),
            _ => None,
        }
    }
}

/// `Formal` is the bare block `Z' = W2·ReLU(W1·Attn(Z) + b1) + b2` with full
/// D×D projections per head. `Practical` is a pre-LayerNorm residual encoder
/// block with D/H-wide heads, 1/√d scaling and optional ALiBi.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockMode {
    Formal,
    Practical,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub variant: AttentionVariant,
    pub block_mode: BlockMode,
    pub alibi: bool,
    /// Apply Softmax1 instead of softmax over the output logits.
    pub output_softmax1: bool,
}

impl ModelConfig {
    /// Toy encoder used for pretraining experiments: D=32, H=4, L=2,
    /// FFN 64, V=64, 64 positions, ALiBi on.
    pub fn toy(variant: AttentionVariant) -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 32,
            ffn_dim: 64,
            vocab_size: 64,
            max_seq_len: 64,
            variant,
            block_mode: BlockMode::Practical,
            alibi: true,
            output_softmax1: false,
        }
    }

    /// Bare block stack with square FFN and output projections, as needed by
    /// the adapter-construction machinery (`vocab_size == ffn_dim == model_dim`).
    pub fn formal(layers: usize, heads: usize, dim: usize, max_seq_len: usize) -> Self {
        Self {
            layers,
            heads,
            model_dim: dim,
            ffn_dim: dim,
            vocab_size: dim,
            max_seq_len,
            variant: AttentionVariant::Softmax1,
            block_mode: BlockMode::Formal,
            alibi: false,
            output_softmax1: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        for (name, v) in [
            ("layers", self.layers),
            ("heads", self.heads),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        match self.block_mode {
            BlockMode::Practical => {
                if self.model_dim % self.heads != 0 {
                    return bad(format!(
                        "model_dim {} not divisible by heads {}",
                        self.model_dim, self.heads
                    ));
                }
            }
            BlockMode::Formal => {
                if self.alibi {
                    return bad("alibi is only available in practical mode".into());
                }
                if self.ffn_dim != self.model_dim {
                    return bad("formal blocks use square D×D feed-forward weights".into());
                }
            }
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        match self.block_mode {
            BlockMode::Formal => self.model_dim,
            BlockMode::Practical => self.model_dim / self.heads,
        }
    }

    /// Multiplier applied to raw attention scores.
    pub fn score_scale(&self) -> f64 {
        match self.block_mode {
            BlockMode::Formal => 1.0,
            BlockMode::Practical => 1.0 / (self.head_dim() as f64).sqrt(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_tags_round_trip() {
        for v in [AttentionVariant::VanillaSoftmax, AttentionVariant::Softmax1] {
            assert_eq!(AttentionVariant::from_tag(v.tag()), Some(v));
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.tag()));
        }
        assert_eq!(AttentionVariant::from_tag("relu"), None);
    }

    #[test]
    fn validation() {
        assert!(ModelConfig::toy(AttentionVariant::Softmax1).validate().is_ok());
        assert!(ModelConfig::formal(2, 2, 4, 8).validate().is_ok());
        let mut c = ModelConfig::toy(AttentionVariant::Softmax1);
        c.heads = 0;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy(AttentionVariant::Softmax1);
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::formal(1, 1, 4, 8);
        c.alibi = true;
        assert!(c.validate().is_err());
    }
}
