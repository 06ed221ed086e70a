//! Twin-encoder ViT with cross class-token reconstruction.
//!
//! One parameter set serves both encoder branches. The decoder receives the
//! class token produced from a degraded image together with patch projections
//! of the pristine original, so everything it knows about the degradation has
//! to travel through the token.

use thiserror::Error;

use crate::tensor::{Element, Tensor, TensorError};

mod forward;
mod params;

pub use forward::{
    assemble_cross_input, attention, decode_reconstruct, decode_tokens, embed, encode, patchify,
    regress_score, transformer_block, unpatchify_image,
};
pub use params::{BlockParams, DecoderParams, EncoderParams, LinearParams, LayerNormParams, ModelParams, ScoreHeadParams};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("image size {image} not divisible by patch size {patch}")]
    IndivisibleDimensions { image: usize, patch: usize },
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub mlp_ratio: f64,
}

impl ModelConfig {
    /// Small preset that trains in minutes on a CPU.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 32,
            patch_size: 8,
            channels: 3,
            embed_dim: 64,
            num_heads: 4,
            encoder_depth: 4,
            decoder_depth: 2,
            mlp_ratio: 4.0,
        }
    }

    /// Full-scale preset: 224px inputs, 12 encoder and 8 decoder blocks.
    pub fn full() -> Self {
        ModelConfig {
            image_size: 224,
            patch_size: 16,
            channels: 3,
            embed_dim: 768,
            num_heads: 12,
            encoder_depth: 12,
            decoder_depth: 8,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.image_size == 0 || self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(ModelError::IndivisibleDimensions {
                image: self.image_size,
                patch: self.patch_size,
            });
        }
        if self.num_heads == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(ModelError::ConfigMismatch(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.channels != 1 && self.channels != 3 {
            return Err(ModelError::ConfigMismatch(format!(
                "channels must be 1 or 3, got {}",
                self.channels
            )));
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 {
            return Err(ModelError::ConfigMismatch("zero-depth tower".into()));
        }
        if self.mlp_hidden() == 0 {
            return Err(ModelError::ConfigMismatch("mlp_ratio too small".into()));
        }
        Ok(())
    }

    /// Patches per image: `(image_size / patch_size)^2`.
    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Flattened patch length: `patch_size^2 * channels`.
    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.mlp_ratio * self.embed_dim as f64) as usize
    }

    /// Sequence length including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }
}

/// Which branch's class token conditions which reconstruction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CrossWiring {
    /// The token from degraded image i conditions the decoder pass whose
    /// target is degraded image i.
    #[default]
    Transfer,
    /// Tokens are exchanged between the branches before decoding.
    Swap,
}

impl std::str::FromStr for CrossWiring {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "transfer" => Ok(CrossWiring::Transfer),
            "swap" => Ok(CrossWiring::Swap),
            other => Err(format!("unknown cross wiring: {other}")),
        }
    }
}

impl std::fmt::Display for CrossWiring {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CrossWiring::Transfer => "transfer",
            CrossWiring::Swap => "swap",
        })
    }
}

/// Encoder result, split at the class position.
pub struct EncoderOutput<E: Element> {
    /// Final-layer output at sequence position 0, length `embed_dim`.
    pub class_token: Tensor<E>,
    /// Remaining positions, `num_patches x embed_dim`.
    pub patch_tokens: Tensor<E>,
}

/// Decoder input: `[quality_token, content_tokens...]` plus decoder
/// positional embeddings, already summed in.
pub struct CrossDecoderInput<E: Element> {
    /// `(num_patches + 1) x embed_dim`.
    pub sequence: Tensor<E>,
}
