use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// What an encoder consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EncoderInput {
    Image { image_size: usize, patch_size: usize },
    Tokens { vocab_size: usize, max_tokens: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input: EncoderInput,
    pub embed_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub mlp_ratio: usize,
    /// Width of the pooled output projection.
    pub output_dim: usize,
}

impl EncoderConfig {
    /// Desk-scale vision transformer: 32×32 input, 8×8 patches, width 64, 4 blocks.
    pub fn desk_vision(image_size: usize) -> Self {
        Self {
            input: EncoderInput::Image {
                image_size,
                patch_size: 8,
            },
            embed_dim: 64,
            n_heads: 4,
            n_layers: 4,
            mlp_ratio: 4,
            output_dim: 64,
        }
    }

    /// Desk-scale causal text transformer.
    pub fn desk_language(vocab_size: usize, max_tokens: usize) -> Self {
        Self {
            input: EncoderInput::Tokens { vocab_size, max_tokens },
            embed_dim: 64,
            n_heads: 4,
            n_layers: 2,
            mlp_ratio: 4,
            output_dim: 64,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.n_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    /// Sequence length seen by the transformer blocks.
    pub fn seq_len(&self) -> usize {
        match self.input {
            EncoderInput::Image { image_size, patch_size } => (image_size / patch_size).pow(2) + 1,
            EncoderInput::Tokens { max_tokens, .. } => max_tokens,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("embed_dim", self.embed_dim),
            ("n_heads", self.n_heads),
            ("n_layers", self.n_layers),
            ("mlp_ratio", self.mlp_ratio),
            ("output_dim", self.output_dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.embed_dim % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} is not divisible by n_heads {}",
                self.embed_dim, self.n_heads
            )));
        }
        match self.input {
            EncoderInput::Image { image_size, patch_size } => {
                if image_size == 0 || patch_size == 0 || image_size % patch_size != 0 {
                    return Err(Error::Config(format!(
                        "image_size {image_size} must be a positive multiple of patch_size {patch_size}"
                    )));
                }
            }
            EncoderInput::Tokens { vocab_size, max_tokens } => {
                if vocab_size == 0 || max_tokens < 2 {
                    return Err(Error::Config(
                        "vocab_size must be positive and max_tokens at least 2".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}
