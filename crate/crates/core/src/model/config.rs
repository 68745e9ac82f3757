use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hyperparameters of the encoder-decoder.
///
/// The last two vocabulary ids are reserved: `vocab_size - 2` is
/// begin-of-sequence and `vocab_size - 1` is end-of-sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Layers per side.
    pub num_layers: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub vocab_size: usize,
    /// Longest decoder input (including begin-of-sequence) and longest source.
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 2,
            model_dim: 64,
            ffn_dim: 128,
            heads: 2,
            vocab_size: 64,
            max_len: 32,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("num_layers", self.num_layers),
            ("model_dim", self.model_dim),
            ("ffn_dim", self.ffn_dim),
            ("heads", self.heads),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("model config: {name} must be positive")));
        }
        if !self.model_dim.is_multiple_of(self.heads) {
            return Err(Error::contract(format!(
                "model_dim {} not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if self.vocab_size < 3 {
            return Err(Error::contract("vocab_size must leave room for two special tokens"));
        }
        Ok(())
    }

    pub fn bos(&self) -> u32 {
        (self.vocab_size - 2) as u32
    }

    pub fn eos(&self) -> u32 {
        (self.vocab_size - 1) as u32
    }

    /// Ids available to ordinary tokens.
    pub fn content_vocab(&self) -> usize {
        self.vocab_size - 2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Embedding,
    LayerNorm,
    Attention,
    Ffn,
    OutputProjection,
    Adapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Encoder,
    Decoder,
}

/// Role of a parameter tensor. `layer` is `None` for tensors outside the
/// block stack (embeddings, final layer norms, output bias).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamGroupTag {
    pub group: ParamGroup,
    pub side: Option<Side>,
    pub layer: Option<usize>,
}

impl ParamGroupTag {
    pub fn new(group: ParamGroup, side: Option<Side>, layer: Option<usize>) -> Self {
        ParamGroupTag { group, side, layer }
    }

    /// Embeddings and layer norms are shared by every domain.
    pub fn is_shared(&self) -> bool {
        matches!(self.group, ParamGroup::Embedding | ParamGroup::LayerNorm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub bottleneck_dim: usize,
}

impl AdapterConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if self.bottleneck_dim == 0 || self.bottleneck_dim >= model.model_dim {
            return Err(Error::contract(format!(
                "adapter bottleneck {} must be in 1..{}",
                self.bottleneck_dim, model.model_dim
            )));
        }
        Ok(())
    }
}
