//! Residual CNN encoder with attentive statistics pooling, and the frozen
//! per-stream model built from it.

mod io;
mod model;
mod net;
mod store;

pub use io::{model_from_bytes, model_to_bytes, read_model, write_model, MODEL_MAGIC};
pub use model::{mean_normalize_embedding, Embedding, ModelWeights, StreamTag};
pub use net::{features_to_tensor, Encoder, Forward};
pub use store::{read_embeddings, write_embeddings, EmbeddingTable};

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InitScheme {
    /// Normal with standard deviation `sqrt(2 / fan_in)`.
    Kaiming,
    /// Uniform on `±sqrt(6 / (fan_in + fan_out))`.
    Xavier,
    /// Normal with standard deviation 0.01.
    Normal,
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InitScheme::Kaiming => "kaiming",
            InitScheme::Xavier => "xavier",
            InitScheme::Normal => "normal",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub n_mels: usize,
    /// Frames per training chunk; inference accepts any length that leaves
    /// at least two pooled time steps.
    pub n_frames: usize,
    pub base_channels: usize,
    pub blocks_per_group: Vec<usize>,
    pub group_strides: Vec<usize>,
    pub embed_dim: usize,
    pub attention_dim: usize,
    pub init: InitScheme,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_mels: 40,
            n_frames: 200,
            base_channels: 16,
            blocks_per_group: vec![3, 4, 6, 3],
            group_strides: vec![1, 2, 2, 2],
            embed_dim: 512,
            attention_dim: 128,
            init: InitScheme::Kaiming,
        }
    }
}

impl EncoderConfig {
    /// Small network for CPU-scale experiments.
    pub fn toy() -> Self {
        Self { base_channels: 4, blocks_per_group: vec![1, 1, 1, 1], embed_dim: 64, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.blocks_per_group.len() != 4 || self.group_strides.len() != 4 {
            return bad("encoder needs exactly 4 residual groups".into());
        }
        if self.blocks_per_group.contains(&0) {
            return bad("every residual group needs at least one block".into());
        }
        if self.group_strides.iter().any(|s| !(1..=2).contains(s)) {
            return bad(format!("group strides must be 1 or 2, got {:?}", self.group_strides));
        }
        if self.embed_dim < 2 {
            return bad(format!("embed_dim must be >= 2, got {}", self.embed_dim));
        }
        if self.base_channels == 0 || self.attention_dim == 0 || self.n_mels == 0 {
            return bad("channel, attention and mel counts must be positive".into());
        }
        Ok(())
    }

    pub fn group_channels(&self, g: usize) -> usize {
        self.base_channels << g
    }

    /// Spatial size `(freq, time)` after the residual groups for an input of
    /// `n_mels × frames`.
    pub fn output_extent(&self, frames: usize) -> (usize, usize) {
        self.group_strides.iter().fold((self.n_mels, frames), |(f, t), &s| (f.div_ceil(s), t.div_ceil(s)))
    }

    /// Per-time-step feature width fed to the pooling layer.
    pub fn pooled_input_dim(&self) -> usize {
        self.output_extent(self.n_frames).0 * self.group_channels(3)
    }
}
