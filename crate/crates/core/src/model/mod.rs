//! Bidirectional transformer encoder with a masked-language-model head.
//!
//! Post-layer-norm residual blocks, exact (erf) GELU, learned absolute
//! positions with two reserved leading slots, and a decoder tied to the
//! token embedding.

mod forward;
mod params;

pub use forward::{
    attention_weights, backward, count_forward_macs, forward, mlm_loss, Batch, ForwardOutput,
    Gradients, Mode,
};
pub use params::{init_params, LayerParams, HeadParams, NamedTensor, Parameters};

pub(crate) use forward::{batch_loss_and_grad, predict_at};

use crate::error::{Error, Result};

/// Position ids of real tokens start here; slots 0 and 1 are reserved.
pub const POSITION_OFFSET: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_positions: usize,
    pub hidden: usize,
    pub heads: usize,
    pub layers: usize,
    pub ffn_dim: usize,
    pub type_vocab: usize,
    pub dropout: f64,
    pub layer_norm_eps: f64,
}

impl ModelConfig {
    /// Published full-size configuration. Used for cost accounting.
    pub fn paper() -> Self {
        ModelConfig {
            vocab_size: 51_100,
            max_positions: 514,
            hidden: 768,
            heads: 12,
            layers: 6,
            ffn_dim: 3072,
            type_vocab: 1,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }

    /// Runnable on a CPU: 128 hidden, 2 layers, 4 heads, sequences up to 128.
    pub fn desk() -> Self {
        ModelConfig {
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            max_positions: 128 + POSITION_OFFSET,
            hidden: 128,
            heads: 4,
            layers: 2,
            ffn_dim: 512,
            type_vocab: 1,
            dropout: 0.1,
            layer_norm_eps: 1e-5,
        }
    }

    /// Desk dimensions with short sequences and no dropout, for smoke tests
    /// and memorization runs.
    pub fn tiny() -> Self {
        ModelConfig {
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            max_positions: 32 + POSITION_OFFSET,
            hidden: 128,
            heads: 4,
            layers: 2,
            ffn_dim: 512,
            type_vocab: 1,
            dropout: 0.0,
            layer_norm_eps: 1e-5,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "desk" => Some(Self::desk()),
            "tiny" => Some(Self::tiny()),
            _ => None,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Longest sequence (including framing tokens) the position table holds.
    pub fn max_seq_len(&self) -> usize {
        self.max_positions.saturating_sub(POSITION_OFFSET)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.hidden == 0 || self.heads == 0 || self.layers == 0 || self.ffn_dim == 0 {
            return bad("hidden, heads, layers and ffn_dim must be positive".into());
        }
        if self.hidden % self.heads != 0 {
            return bad(format!("hidden {} not divisible by heads {}", self.hidden, self.heads));
        }
        if self.vocab_size == 0 || self.type_vocab == 0 {
            return bad("vocab_size and type_vocab must be positive".into());
        }
        if self.max_positions <= POSITION_OFFSET {
            return bad(format!("max_positions must exceed {POSITION_OFFSET}"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.layer_norm_eps > 0.0) {
            return bad("layer_norm_eps must be positive".into());
        }
        Ok(())
    }

    /// `key=value` lines, the format used in checkpoint headers and manifests.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        vec![
            ("vocab_size".into(), self.vocab_size.to_string()),
            ("max_positions".into(), self.max_positions.to_string()),
            ("hidden".into(), self.hidden.to_string()),
            ("heads".into(), self.heads.to_string()),
            ("layers".into(), self.layers.to_string()),
            ("ffn_dim".into(), self.ffn_dim.to_string()),
            ("type_vocab".into(), self.type_vocab.to_string()),
            ("dropout".into(), format!("{}", self.dropout)),
            ("layer_norm_eps".into(), format!("{}", self.layer_norm_eps)),
        ]
    }

    pub fn from_kv<'a>(mut lookup: impl FnMut(&str) -> Option<&'a str>) -> Result<Self> {
        let mut get = |k: &str| {
            lookup(k).ok_or_else(|| Error::InvalidConfig(format!("missing key {k}")))
        };
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.parse()
                .map_err(|_| Error::InvalidConfig(format!("bad value {v:?} for {k}")))
        }
        let cfg = ModelConfig {
            vocab_size: num("vocab_size", get("vocab_size")?)?,
            max_positions: num("max_positions", get("max_positions")?)?,
            hidden: num("hidden", get("hidden")?)?,
            heads: num("heads", get("heads")?)?,
            layers: num("layers", get("layers")?)?,
            ffn_dim: num("ffn_dim", get("ffn_dim")?)?,
            type_vocab: num("type_vocab", get("type_vocab")?)?,
            dropout: num("dropout", get("dropout")?)?,
            layer_norm_eps: num("layer_norm_eps", get("layer_norm_eps")?)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
