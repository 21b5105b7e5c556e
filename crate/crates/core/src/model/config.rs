use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Hidden width of the pointwise feedforward relative to `embed_dim`.
pub const MLP_RATIO: usize = 4;

/// Shape hyper-parameters of the diffusion transformer.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiTConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub num_blocks: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    /// Number of diffusion steps `T`; valid timesteps are `0..T`.
    pub timesteps: usize,
}

impl Default for DiTConfig {
    fn default() -> Self {
        DiTConfig {
            image_size: 16,
            channels: 1,
            patch_size: 4,
            embed_dim: 32,
            num_blocks: 2,
            num_heads: 4,
            num_classes: 8,
            timesteps: 100,
        }
    }
}

impl DiTConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("embed_dim", self.embed_dim),
            ("num_blocks", self.num_blocks),
            ("num_heads", self.num_heads),
            ("num_classes", self.num_classes),
            ("timesteps", self.timesteps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "model.image_size {} is not divisible by model.patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model.embed_dim {} is not divisible by model.num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "model.embed_dim {} must be even for sinusoidal embeddings",
                self.embed_dim
            )));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn num_tokens(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Values per patch token, `channels · patch_size²`.
    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        self.embed_dim * MLP_RATIO
    }

    /// Shape of one image, `[channels, image_size, image_size]`.
    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.image_size, self.image_size]
    }

    pub fn image_numel(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }
}
