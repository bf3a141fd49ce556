use serde::{Deserialize, Serialize};

use crate::attention::{AttentionConfig, AttentionFlags};
use crate::error::{Error, Result};

/// Token id reserved for padding. Task alphabets start at 1.
pub const PAD: usize = 0;

/// Which segments carry a task loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Only the last segment is classified.
    #[default]
    Final,
    /// Every segment is classified against its own target.
    EverySegment,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding dimension.
    pub d: usize,
    /// Hidden layer neurons of the attention block.
    pub m: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub n_layers: usize,
    pub n_mem_tokens: usize,
    pub seg_len: usize,
    pub n_segments: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub n_classes: usize,
    pub alpha: f64,
    pub pos_scale: f64,
    pub use_h_astro: bool,
    pub use_p: bool,
    pub loss_mode: LossMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 16,
            m: 12,
            n_heads: 2,
            ffn_dim: 32,
            n_layers: 1,
            n_mem_tokens: 4,
            seg_len: 16,
            n_segments: 2,
            dropout: 0.0,
            vocab_size: 32,
            n_classes: 8,
            alpha: 0.25,
            pos_scale: 2.0,
            use_h_astro: true,
            use_p: true,
            loss_mode: LossMode::Final,
        }
    }
}

impl ModelConfig {
    /// Rows seen by the attention block: sequence tokens then memory tokens.
    pub fn block_len(&self) -> usize {
        self.seg_len + self.n_mem_tokens
    }

    pub fn max_len(&self) -> usize {
        self.seg_len * self.n_segments
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d: self.d,
            m: self.m,
            n_heads: self.n_heads,
            n_max: self.block_len(),
            alpha: self.alpha,
            pos_scale: self.pos_scale,
        }
    }

    pub fn flags(&self) -> AttentionFlags {
        AttentionFlags { use_h_astro: self.use_h_astro, use_p: self.use_p }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("m", self.m),
            ("n_heads", self.n_heads),
            ("ffn_dim", self.ffn_dim),
            ("n_layers", self.n_layers),
            ("seg_len", self.seg_len),
            ("n_segments", self.n_segments),
            ("n_classes", self.n_classes),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be at least 1")));
            }
        }
        if self.vocab_size < 2 {
            return Err(Error::InvalidArgument("vocab_size must include the pad token and one symbol".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidArgument(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        self.attention().validate()
    }
}
