use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Named model scales. `VitbShape` matches the published ViT-B layout and is
/// only meant for parameter accounting, not for training on a CPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScalePreset {
    Tiny,
    Small,
    VitbShape,
}

impl std::str::FromStr for ScalePreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Self::Tiny),
            "small" => Ok(Self::Small),
            "vitb-shape" | "vitb" => Ok(Self::VitbShape),
            other => Err(Error::Config(format!("unknown preset {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub scale_preset: ScalePreset,
    pub image_size: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub encoder_mlp_ratio: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_mlp_dim: usize,
    /// Internal width divisor of the decoder's token/image cross-attentions.
    pub cross_attention_downsample: usize,
    pub num_mask_outputs: usize,
    pub mask_prompt_size: usize,
    /// Hidden channels of the dense mask-prompt stem.
    pub mask_in_chans: usize,
    /// Seed for the synthetic base weights standing in for a pretrained model.
    pub base_seed: u64,
}

impl ModelConfig {
    pub fn preset(preset: ScalePreset) -> Self {
        match preset {
            ScalePreset::Tiny => Self {
                scale_preset: preset,
                image_size: 256,
                patch_size: 16,
                encoder_dim: 64,
                encoder_depth: 2,
                encoder_heads: 4,
                encoder_mlp_ratio: 4,
                decoder_dim: 64,
                decoder_depth: 2,
                decoder_heads: 4,
                decoder_mlp_dim: 256,
                cross_attention_downsample: 2,
                num_mask_outputs: 3,
                mask_prompt_size: 64,
                mask_in_chans: 16,
                base_seed: 0,
            },
            ScalePreset::Small => Self {
                scale_preset: preset,
                image_size: 512,
                patch_size: 16,
                encoder_dim: 128,
                encoder_depth: 4,
                encoder_heads: 4,
                encoder_mlp_ratio: 4,
                decoder_dim: 128,
                decoder_depth: 2,
                decoder_heads: 8,
                decoder_mlp_dim: 512,
                cross_attention_downsample: 2,
                num_mask_outputs: 3,
                mask_prompt_size: 128,
                mask_in_chans: 16,
                base_seed: 0,
            },
            ScalePreset::VitbShape => Self {
                scale_preset: preset,
                image_size: 1024,
                patch_size: 16,
                encoder_dim: 768,
                encoder_depth: 12,
                encoder_heads: 12,
                encoder_mlp_ratio: 4,
                decoder_dim: 256,
                decoder_depth: 2,
                decoder_heads: 8,
                decoder_mlp_dim: 2048,
                cross_attention_downsample: 2,
                num_mask_outputs: 3,
                mask_prompt_size: 256,
                mask_in_chans: 16,
                base_seed: 0,
            },
        }
    }

    pub fn tiny() -> Self {
        Self::preset(ScalePreset::Tiny)
    }

    pub fn small() -> Self {
        Self::preset(ScalePreset::Small)
    }

    pub fn vitb_shape() -> Self {
        Self::preset(ScalePreset::VitbShape)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return fail(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.num_mask_outputs != 3 {
            return fail(format!(
                "num_mask_outputs must be 3, got {}",
                self.num_mask_outputs
            ));
        }
        if self.mask_prompt_size * 4 != self.image_size {
            return fail(format!(
                "mask_prompt_size {} must equal image_size/4",
                self.mask_prompt_size
            ));
        }
        // the dense stem and the output upscaler both move by a factor of 4
        if self.grid_size() * 4 != self.mask_prompt_size {
            return fail(format!(
                "embedding grid {} must be a quarter of mask_prompt_size {} (patch_size 16)",
                self.grid_size(),
                self.mask_prompt_size
            ));
        }
        if self.encoder_heads == 0 || !self.encoder_dim.is_multiple_of(self.encoder_heads) {
            return fail("encoder_dim must be divisible by encoder_heads".into());
        }
        if !self.decoder_dim.is_multiple_of(8) {
            return fail("decoder_dim must be divisible by 8".into());
        }
        let cross = self.decoder_dim / self.cross_attention_downsample.max(1);
        if self.decoder_heads == 0
            || !self.decoder_dim.is_multiple_of(self.decoder_heads)
            || !cross.is_multiple_of(self.decoder_heads)
        {
            return fail("decoder attention widths must be divisible by decoder_heads".into());
        }
        if self.encoder_depth == 0 || self.decoder_depth == 0 {
            return fail("encoder and decoder depth must be positive".into());
        }
        if !self.mask_in_chans.is_multiple_of(4) || self.mask_in_chans == 0 {
            return fail("mask_in_chans must be a positive multiple of 4".into());
        }
        Ok(())
    }

    /// Side of the image-embedding grid, `image_size / patch_size`.
    pub fn grid_size(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// `[encoder_dim, grid, grid]`, the encoder output before the neck.
    pub fn embedding_shape(&self) -> [usize; 3] {
        let g = self.grid_size();
        [self.encoder_dim, g, g]
    }

    pub fn cross_attention_dim(&self) -> usize {
        self.decoder_dim / self.cross_attention_downsample
    }

    /// Hex SHA-256 of the canonical JSON form; identifies the base model.
    pub fn config_hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}
