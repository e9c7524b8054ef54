//! A promptable segmentation model with the three-part structure: image
//! encoder, prompt encoder, and a mask decoder that emits three mask
//! hypotheses with predicted IoU scores.

mod attention;
mod config;
mod image_encoder;
mod mask_decoder;
mod pos;
mod prompt;

use std::sync::atomic::{AtomicUsize, Ordering};

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use attention::Attention;
pub use config::{ModelConfig, ScalePreset};
pub use image_encoder::{EncoderBlock, ImageEmbedding, ImageEncoder};
pub use mask_decoder::{DecoderOutput, MaskDecoder, TwoWayBlock, TwoWayTransformer};
pub use prompt::{
    BoxPrompt, MaskStem, PointLabel, PointPrompt, PromptEmbedding, PromptEncoder, PromptSet,
};

use crate::error::Result;
use crate::lora::InjectionPlan;
use crate::mask::{upsample_bilinear, BinaryMask};
use crate::params::{join, Param, Parameterized};

/// Top-level model component, used for injection targets and freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    ImageEncoder,
    PromptEncoder,
    MaskDecoder,
}

impl Component {
    pub fn prefix(self) -> &'static str {
        match self {
            Component::ImageEncoder => "image_encoder",
            Component::PromptEncoder => "prompt_encoder",
            Component::MaskDecoder => "mask_decoder",
        }
    }

    /// Component owning a dotted parameter path.
    pub fn of_path(path: &str) -> Option<Self> {
        let head = path.split('.').next()?;
        [Self::ImageEncoder, Self::PromptEncoder, Self::MaskDecoder]
            .into_iter()
            .find(|c| c.prefix() == head)
    }
}

/// Materialized model output.
#[derive(Debug, Clone)]
pub struct MaskPrediction {
    /// Binary masks at canvas resolution (`image_size²`).
    pub masks: Vec<BinaryMask>,
    pub iou_scores: Vec<f32>,
    /// `[3, mask_prompt_size, mask_prompt_size]` pre-threshold logits.
    pub logits: Tensor,
}

impl MaskPrediction {
    pub fn from_output(out: &DecoderOutput, image_size: usize, threshold: f32) -> Result<Self> {
        let (n, m, _) = out.logits.dims3()?;
        let iou_scores = out.iou_scores.to_vec1::<f32>()?;
        let flat = out.logits.detach().reshape((n, m * m))?.to_vec2::<f32>()?;
        let masks = flat
            .iter()
            .map(|l| {
                let up = upsample_bilinear(l, m, m, image_size, image_size);
                BinaryMask::threshold(&up, image_size, image_size, threshold)
            })
            .collect();
        Ok(Self {
            masks,
            iou_scores,
            logits: out.logits.clone(),
        })
    }

    pub fn level_logits(&self, level: usize) -> Result<Tensor> {
        Ok(self.logits.get(level)?)
    }
}

#[derive(Debug)]
pub struct SamModel {
    config: ModelConfig,
    pub image_encoder: ImageEncoder,
    pub prompt_encoder: PromptEncoder,
    pub mask_decoder: MaskDecoder,
    image_pe: Tensor,
    pub(crate) injection: Option<InjectionPlan>,
    forward_calls: AtomicUsize,
}

impl SamModel {
    /// Builds the model with base weights drawn from `config.base_seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.base_seed);
        let image_encoder = ImageEncoder::new(&mut rng, &config)?;
        let prompt_encoder = PromptEncoder::new(&mut rng, &config)?;
        let mask_decoder = MaskDecoder::new(&mut rng, &config)?;
        let image_pe = pos::grid_encoding(config.grid_size(), config.decoder_dim)?;
        Ok(Self {
            config,
            image_encoder,
            prompt_encoder,
            mask_decoder,
            image_pe,
            injection: None,
            forward_calls: AtomicUsize::new(0),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn injection_plan(&self) -> Option<&InjectionPlan> {
        self.injection.as_ref()
    }

    pub fn encode_image(&self, image: &Tensor) -> Result<ImageEmbedding> {
        self.image_encoder.forward(image)
    }

    pub fn encode_prompts(&self, prompts: &PromptSet) -> Result<PromptEmbedding> {
        prompts.validate(&self.config)?;
        self.prompt_encoder.forward(prompts)
    }

    pub fn decode_masks(
        &self,
        embedding: &ImageEmbedding,
        prompt: &PromptEmbedding,
    ) -> Result<DecoderOutput> {
        self.mask_decoder.forward(embedding, prompt, &self.image_pe)
    }

    /// Differentiable forward pass; counts towards [`SamModel::forward_calls`].
    pub fn forward_raw(&self, image: &Tensor, prompts: &PromptSet) -> Result<DecoderOutput> {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let embedding = self.encode_image(image)?;
        let prompt = self.encode_prompts(prompts)?;
        self.decode_masks(&embedding, &prompt)
    }

    /// Decoder-only forward over a precomputed image embedding.
    pub fn forward_with_embedding(
        &self,
        embedding: &ImageEmbedding,
        prompts: &PromptSet,
    ) -> Result<DecoderOutput> {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let prompt = self.encode_prompts(prompts)?;
        self.decode_masks(embedding, &prompt)
    }

    pub fn forward(&self, image: &Tensor, prompts: &PromptSet) -> Result<MaskPrediction> {
        let out = self.forward_raw(image, prompts)?;
        MaskPrediction::from_output(&out, self.config.image_size, 0.0)
    }

    /// Number of forward passes run so far (instrumentation).
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    /// Every attention module in the model, in a fixed structural order,
    /// tagged with its component and path.
    pub fn attention_sites(&self) -> Vec<(Component, String, &Attention)> {
        let mut out = Vec::new();
        for (i, b) in self.image_encoder.blocks.iter().enumerate() {
            out.push((
                Component::ImageEncoder,
                format!("image_encoder.blocks.{i}.attn"),
                &b.attn,
            ));
        }
        let t = &self.mask_decoder.transformer;
        for (i, l) in t.layers.iter().enumerate() {
            let p = format!("mask_decoder.transformer.layers.{i}");
            out.push((
                Component::MaskDecoder,
                format!("{p}.self_attn"),
                &l.self_attn,
            ));
            out.push((
                Component::MaskDecoder,
                format!("{p}.cross_token_to_image"),
                &l.cross_token_to_image,
            ));
            out.push((
                Component::MaskDecoder,
                format!("{p}.cross_image_to_token"),
                &l.cross_image_to_token,
            ));
        }
        out.push((
            Component::MaskDecoder,
            "mask_decoder.transformer.final_attn".into(),
            &t.final_attn,
        ));
        out
    }

    pub fn attention_sites_mut(&mut self) -> Vec<(Component, String, &mut Attention)> {
        let mut out = Vec::new();
        for (i, b) in self.image_encoder.blocks.iter_mut().enumerate() {
            out.push((
                Component::ImageEncoder,
                format!("image_encoder.blocks.{i}.attn"),
                &mut b.attn,
            ));
        }
        let t = &mut self.mask_decoder.transformer;
        for (i, l) in t.layers.iter_mut().enumerate() {
            let p = format!("mask_decoder.transformer.layers.{i}");
            out.push((
                Component::MaskDecoder,
                format!("{p}.self_attn"),
                &mut l.self_attn,
            ));
            out.push((
                Component::MaskDecoder,
                format!("{p}.cross_token_to_image"),
                &mut l.cross_token_to_image,
            ));
            out.push((
                Component::MaskDecoder,
                format!("{p}.cross_image_to_token"),
                &mut l.cross_image_to_token,
            ));
        }
        out.push((
            Component::MaskDecoder,
            "mask_decoder.transformer.final_attn".into(),
            &mut t.final_attn,
        ));
        out
    }

    /// Total number of scalar parameters, base and adapter.
    pub fn parameter_count(&self) -> usize {
        self.named_params()
            .iter()
            .map(|(_, p)| p.elem_count())
            .sum()
    }
}

impl Parameterized for SamModel {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.image_encoder
            .visit(&join(prefix, "image_encoder"), out);
        self.prompt_encoder
            .visit(&join(prefix, "prompt_encoder"), out);
        self.mask_decoder.visit(&join(prefix, "mask_decoder"), out);
    }
}
