//! Prompt types and the prompt encoder.
//!
//! An empty [`PromptSet`] is the "no prompt" input used for plain LoRA
//! fine-tuning and plain inference: it yields zero sparse tokens and the
//! learned no-mask dense embedding.

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use super::pos;
use crate::error::{Error, Result};
use crate::nn::{space_to_depth, Activation, LayerNorm, Linear};
use crate::params::{join, Init, Param, ParamRole, Parameterized};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PointLabel {
    Foreground,
    Background,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PointPrompt {
    pub x: f32,
    pub y: f32,
    pub label: PointLabel,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoxPrompt {
    pub x1: f32,
    pub y1: f32,
    pub x2: f32,
    pub y2: f32,
}

/// Points, boxes and a dense logit map, all in canvas pixels and all optional.
#[derive(Debug, Clone, Default)]
pub struct PromptSet {
    pub points: Vec<PointPrompt>,
    pub boxes: Vec<BoxPrompt>,
    /// `[mask_prompt_size, mask_prompt_size]` logits.
    pub mask_logits: Option<Tensor>,
}

impl PromptSet {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty() && self.boxes.is_empty() && self.mask_logits.is_none()
    }

    pub fn with_mask(mask_logits: Tensor) -> Self {
        Self {
            mask_logits: Some(mask_logits),
            ..Self::default()
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let s = cfg.image_size as f32;
        let inside = |v: f32| v.is_finite() && (0.0..s).contains(&v);
        for p in &self.points {
            if !inside(p.x) || !inside(p.y) {
                return Err(Error::Validation(format!(
                    "point ({}, {}) outside [0, {s})",
                    p.x, p.y
                )));
            }
        }
        for b in &self.boxes {
            let ok =
                b.x1 < b.x2 && b.y1 < b.y2 && b.x1 >= 0.0 && b.y1 >= 0.0 && b.x2 <= s && b.y2 <= s;
            if !ok {
                return Err(Error::Validation(format!("invalid box prompt {b:?}")));
            }
        }
        if let Some(m) = &self.mask_logits {
            let want = [cfg.mask_prompt_size, cfg.mask_prompt_size];
            if m.dims() != want {
                return Err(Error::Validation(format!(
                    "mask prompt shape {:?}, expected {want:?}",
                    m.dims()
                )));
            }
        }
        Ok(())
    }
}

/// Encoded prompts.
#[derive(Debug, Clone)]
pub struct PromptEmbedding {
    /// `[n_tokens, decoder_dim]`; `n_tokens` may be zero.
    pub sparse_tokens: Tensor,
    /// `[grid², decoder_dim]` row-major over the embedding grid.
    pub dense_embedding: Tensor,
}

impl PromptEmbedding {
    pub fn num_sparse(&self) -> usize {
        self.sparse_tokens.dims()[0]
    }
}

const FOREGROUND: usize = 0;
const BACKGROUND: usize = 1;
const BOX_TOP_LEFT: usize = 2;
const BOX_BOTTOM_RIGHT: usize = 3;

/// Downsamples a dense mask prompt by 4 onto the embedding grid.
#[derive(Debug)]
pub struct MaskStem {
    pub conv1: Linear,
    pub norm1: LayerNorm,
    pub conv2: Linear,
    pub norm2: LayerNorm,
    pub conv3: Linear,
}

impl MaskStem {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let c = cfg.mask_in_chans;
        Ok(Self {
            conv1: Linear::new(rng, 4, c / 4, true)?,
            norm1: LayerNorm::new(rng, c / 4, 1e-6)?,
            conv2: Linear::new(rng, c, c, true)?,
            norm2: LayerNorm::new(rng, c, 1e-6)?,
            conv3: Linear::new(rng, c, cfg.decoder_dim, true)?,
        })
    }

    fn forward(&self, mask: &Tensor) -> Result<Tensor> {
        let (m, _) = mask.dims2()?;
        let x = space_to_depth(&mask.reshape((m, m, 1))?, 2)?;
        let x = Activation::Gelu.apply(&self.norm1.forward(&self.conv1.forward(&x)?)?)?;
        let c4 = x.dim(1)?;
        let x = space_to_depth(&x.reshape((m / 2, m / 2, c4))?, 2)?;
        let x = Activation::Gelu.apply(&self.norm2.forward(&self.conv2.forward(&x)?)?)?;
        self.conv3.forward(&x)
    }
}

impl Parameterized for MaskStem {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.conv1.visit(&join(prefix, "conv1"), out);
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.conv2.visit(&join(prefix, "conv2"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
        self.conv3.visit(&join(prefix, "conv3"), out);
    }
}

#[derive(Debug)]
pub struct PromptEncoder {
    /// Learned label embeddings: foreground, background, box corner TL, box corner BR.
    pub point_embeddings: Param,
    pub no_mask_embed: Param,
    pub mask_stem: MaskStem,
    dim: usize,
    grid: usize,
    image_size: usize,
}

impl PromptEncoder {
    pub(crate) fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.decoder_dim;
        let (point_embeddings, no_mask_embed) = {
            let mut init = Init { rng: &mut *rng };
            (
                init.normal(&[4, d], 1.0, ParamRole::Base)?,
                init.normal(&[1, d], 1.0, ParamRole::Base)?,
            )
        };
        Ok(Self {
            point_embeddings,
            no_mask_embed,
            mask_stem: MaskStem::new(rng, cfg)?,
            dim: d,
            grid: cfg.grid_size(),
            image_size: cfg.image_size,
        })
    }

    fn coords_pe(&self, coords: &[(f32, f32)]) -> Result<Tensor> {
        let s = self.image_size as f32;
        let norm: Vec<(f32, f32)> = coords
            .iter()
            .map(|&(x, y)| ((x + 0.5) / s, (y + 0.5) / s))
            .collect();
        pos::encode_coords(&norm, self.dim)
    }

    pub fn forward(&self, prompts: &PromptSet) -> Result<PromptEmbedding> {
        let table = self.point_embeddings.tensor();
        let mut coords = Vec::new();
        let mut labels = Vec::new();
        for p in &prompts.points {
            coords.push((p.x, p.y));
            labels.push(match p.label {
                PointLabel::Foreground => FOREGROUND as u32,
                PointLabel::Background => BACKGROUND as u32,
            });
        }
        for b in &prompts.boxes {
            coords.push((b.x1, b.y1));
            labels.push(BOX_TOP_LEFT as u32);
            coords.push((b.x2, b.y2));
            labels.push(BOX_BOTTOM_RIGHT as u32);
        }
        let sparse_tokens = if coords.is_empty() {
            Tensor::zeros((0, self.dim), candle_core::DType::F32, &Device::Cpu)?
        } else {
            let idx = Tensor::new(labels.as_slice(), &Device::Cpu)?;
            let label_embed = table.index_select(&idx, 0)?;
            (self.coords_pe(&coords)? + label_embed)?
        };
        let dense_embedding = match &prompts.mask_logits {
            Some(mask) => self.mask_stem.forward(mask)?,
            None => self
                .no_mask_embed
                .tensor()
                .broadcast_as((self.grid * self.grid, self.dim))?
                .contiguous()?,
        };
        Ok(PromptEmbedding {
            sparse_tokens,
            dense_embedding,
        })
    }
}

impl Parameterized for PromptEncoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "point_embeddings"), &self.point_embeddings));
        out.push((join(prefix, "no_mask_embed"), &self.no_mask_embed));
        self.mask_stem.visit(&join(prefix, "mask_stem"), out);
    }
}
