//! Encoder-decoder transformer with two layer-stacking policies.
//!
//! Vanilla stacking stores `depth` independent layers. Recurrent stacking
//! stores exactly one encoder layer and one decoder layer and applies
//! them `depth` times, which keeps the parameter count of an N-deep model
//! at the budget of a 1-layer model. The decoder can be asked to run at a
//! different recurrence count than the model was trained with.

mod forward;
mod params;

#[cfg(test)]
mod model_tests;

pub use forward::{
    decode_forward, encode, layer_stack, multi_head_attention, sinusoidal_positions, AttnProj,
    IdMatrix, StackSide,
};
pub use params::{tensor_inventory, Bound, Layout, ModelParams, ParamEntry};

use crate::tensor::TensorError;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StackingMode {
    Vanilla,
    Recurrent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingSharing {
    /// Independent source embedding, target embedding, output projection.
    Separate,
    /// Output projection reuses the target embedding matrix.
    TgtSoftmaxTied,
    /// One matrix serves source embedding, target embedding and softmax.
    JointAllTied,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Number of layer applications N.
    pub depth: usize,
    pub stacking: StackingMode,
    pub dropout_p: f64,
    pub label_smoothing: f64,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub embedding_sharing: EmbeddingSharing,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        // desk-scale defaults: trains on one CPU core in minutes while
        // still showing the depth trend
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            depth: 2,
            stacking: StackingMode::Recurrent,
            dropout_p: 0.1,
            label_smoothing: 0.1,
            src_vocab_size: 68,
            tgt_vocab_size: 68,
            embedding_sharing: EmbeddingSharing::JointAllTied,
            max_len: 256,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_model % 2 != 0 {
            return Err(ModelError::Config(format!(
                "d_model {} must be even for sinusoidal positions",
                self.d_model
            )));
        }
        if self.depth == 0 {
            return Err(ModelError::Config("depth must be at least 1".into()));
        }
        if self.embedding_sharing == EmbeddingSharing::JointAllTied
            && self.src_vocab_size != self.tgt_vocab_size
        {
            return Err(ModelError::Config(format!(
                "joint_all_tied needs equal vocabularies, got {} and {}",
                self.src_vocab_size, self.tgt_vocab_size
            )));
        }
        for (name, v) in [
            ("dropout_p", self.dropout_p),
            ("label_smoothing", self.label_smoothing),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(ModelError::Config(format!("{name} {v} outside [0, 1)")));
            }
        }
        if self.src_vocab_size < 5 || self.tgt_vocab_size < 5 {
            return Err(ModelError::Config(
                "vocabularies must hold the four reserved ids plus content".into(),
            ));
        }
        if self.max_len == 0 {
            return Err(ModelError::Config("max_len must be at least 1".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("configuration: {0}")]
    Config(String),
    #[error("attention: query position {query} has no unmasked keys")]
    AllKeysMasked { query: usize },
}

/// Parameter elements of one encoder layer.
pub fn encoder_layer_param_count(d_model: usize, d_ff: usize) -> usize {
    4 * d_model * d_model + 2 * d_model * d_ff + d_ff + d_model + 2 * (2 * d_model)
}

/// Parameter elements of one decoder layer (cross attention and a third
/// norm on top of the encoder layer inventory).
pub fn decoder_layer_param_count(d_model: usize, d_ff: usize) -> usize {
    8 * d_model * d_model + 2 * d_model * d_ff + d_ff + d_model + 3 * (2 * d_model)
}

/// Total parameter elements for a config, tied tensors counted once.
/// With `include_optimizer_slots` every trainable element is counted
/// three times (the parameter and Adam's two moment accumulators).
pub fn param_count(config: &ModelConfig, include_optimizer_slots: bool) -> usize {
    let raw: usize = params::tensor_inventory(config)
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>())
        .sum();
    if include_optimizer_slots {
        raw * 3
    } else {
        raw
    }
}
