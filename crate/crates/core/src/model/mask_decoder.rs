//! Two-way transformer mask decoder producing three mask hypotheses.

use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::attention::Attention;
use super::config::ModelConfig;
use super::image_encoder::ImageEmbedding;
use super::prompt::PromptEmbedding;
use crate::error::{Error, Result};
use crate::nn::{depth_to_space, Activation, LayerNorm, Linear, Mlp};
use crate::params::{join, Init, Param, ParamRole, Parameterized};

/// One block of the two-way transformer: token self-attention, tokens attend
/// to the image, token MLP, then the image attends back to the tokens.
#[derive(Debug)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_token_to_image: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
    pub norm3: LayerNorm,
    pub cross_image_to_token: Attention,
    pub norm4: LayerNorm,
    skip_first_pe: bool,
}

impl TwoWayBlock {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig, skip_first_pe: bool) -> Result<Self> {
        let d = cfg.decoder_dim;
        let cross = cfg.cross_attention_dim();
        let h = cfg.decoder_heads;
        Ok(Self {
            self_attn: Attention::new(rng, d, d, h)?,
            norm1: LayerNorm::new(rng, d, 1e-5)?,
            cross_token_to_image: Attention::new(rng, d, cross, h)?,
            norm2: LayerNorm::new(rng, d, 1e-5)?,
            mlp: Mlp::new(rng, &[d, cfg.decoder_mlp_dim, d], Activation::Relu)?,
            norm3: LayerNorm::new(rng, d, 1e-5)?,
            cross_image_to_token: Attention::new(rng, d, cross, h)?,
            norm4: LayerNorm::new(rng, d, 1e-5)?,
            skip_first_pe,
        })
    }

    fn forward(
        &self,
        queries: &Tensor,
        keys: &Tensor,
        query_pe: &Tensor,
        key_pe: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let queries = if self.skip_first_pe {
            self.self_attn.forward(queries, queries, queries)?
        } else {
            let q = (queries + query_pe)?;
            (queries + self.self_attn.forward(&q, &q, queries)?)?
        };
        let queries = self.norm1.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        let queries = (&queries + self.cross_token_to_image.forward(&q, &k, keys)?)?;
        let queries = self.norm2.forward(&queries)?;

        let queries = (&queries + self.mlp.forward(&queries)?)?;
        let queries = self.norm3.forward(&queries)?;

        let q = (&queries + query_pe)?;
        let k = (keys + key_pe)?;
        let keys = (keys + self.cross_image_to_token.forward(&k, &q, &queries)?)?;
        let keys = self.norm4.forward(&keys)?;
        Ok((queries, keys))
    }
}

impl Parameterized for TwoWayBlock {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.self_attn.visit(&join(prefix, "self_attn"), out);
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.cross_token_to_image
            .visit(&join(prefix, "cross_token_to_image"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
        self.mlp.visit(&join(prefix, "mlp"), out);
        self.norm3.visit(&join(prefix, "norm3"), out);
        self.cross_image_to_token
            .visit(&join(prefix, "cross_image_to_token"), out);
        self.norm4.visit(&join(prefix, "norm4"), out);
    }
}

#[derive(Debug)]
pub struct TwoWayTransformer {
    pub layers: Vec<TwoWayBlock>,
    pub final_attn: Attention,
    pub norm_final: LayerNorm,
}

impl TwoWayTransformer {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let layers = (0..cfg.decoder_depth)
            .map(|i| TwoWayBlock::new(rng, cfg, i == 0))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            layers,
            final_attn: Attention::new(
                rng,
                cfg.decoder_dim,
                cfg.cross_attention_dim(),
                cfg.decoder_heads,
            )?,
            norm_final: LayerNorm::new(rng, cfg.decoder_dim, 1e-5)?,
        })
    }

    /// Returns updated `(tokens, image)`.
    fn forward(
        &self,
        image: &Tensor,
        image_pe: &Tensor,
        tokens: &Tensor,
    ) -> Result<(Tensor, Tensor)> {
        let mut queries = tokens.clone();
        let mut keys = image.clone();
        for layer in &self.layers {
            (queries, keys) = layer.forward(&queries, &keys, tokens, image_pe)?;
        }
        let q = (&queries + tokens)?;
        let k = (&keys + image_pe)?;
        let queries = (&queries + self.final_attn.forward(&q, &k, &keys)?)?;
        Ok((self.norm_final.forward(&queries)?, keys))
    }
}

impl Parameterized for TwoWayTransformer {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), out);
        }
        self.final_attn.visit(&join(prefix, "final_attn"), out);
        self.norm_final.visit(&join(prefix, "norm_final"), out);
    }
}

/// Differentiable decoder outputs.
#[derive(Debug, Clone)]
pub struct DecoderOutput {
    /// `[3, mask_prompt_size, mask_prompt_size]`.
    pub logits: Tensor,
    /// `[3]`.
    pub iou_scores: Tensor,
}

#[derive(Debug)]
pub struct MaskDecoder {
    pub iou_token: Param,
    pub mask_tokens: Param,
    pub transformer: TwoWayTransformer,
    pub upscale1: Linear,
    pub upscale_norm: LayerNorm,
    pub upscale2: Linear,
    pub hypernetworks: Vec<Mlp>,
    pub iou_head: Linear,
    dim: usize,
    grid: usize,
    num_masks: usize,
}

impl MaskDecoder {
    pub(crate) fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.decoder_dim;
        let n = cfg.num_mask_outputs;
        let (iou_token, mask_tokens) = {
            let mut init = Init { rng: &mut *rng };
            (
                init.normal(&[1, d], 1.0, ParamRole::Base)?,
                init.normal(&[n, d], 1.0, ParamRole::Base)?,
            )
        };
        let transformer = TwoWayTransformer::new(rng, cfg)?;
        let upscale1 = Linear::new(rng, d, 4 * (d / 4), true)?;
        let upscale_norm = LayerNorm::new(rng, d / 4, 1e-6)?;
        let upscale2 = Linear::new(rng, d / 4, 4 * (d / 8), true)?;
        let hypernetworks = (0..n)
            .map(|_| Mlp::new(rng, &[d, d, d, d / 8], Activation::Relu))
            .collect::<Result<Vec<_>>>()?;
        let iou_head = Linear::new(rng, d, n, true)?;
        Ok(Self {
            iou_token,
            mask_tokens,
            transformer,
            upscale1,
            upscale_norm,
            upscale2,
            hypernetworks,
            iou_head,
            dim: d,
            grid: cfg.grid_size(),
            num_masks: n,
        })
    }

    pub fn forward(
        &self,
        embedding: &ImageEmbedding,
        prompt: &PromptEmbedding,
        image_pe: &Tensor,
    ) -> Result<DecoderOutput> {
        let g = self.grid;
        let d = self.dim;
        if embedding.grid != g || embedding.projected.dims() != [g * g, d] {
            return Err(Error::Shape(format!(
                "decoder expects embedding [{}, {d}], got {:?}",
                g * g,
                embedding.projected.dims()
            )));
        }
        if prompt.dense_embedding.dims() != [g * g, d] || prompt.sparse_tokens.dim(1)? != d {
            return Err(Error::Shape(
                "prompt embedding width does not match decoder".into(),
            ));
        }

        // output tokens come first, prompt tokens after them
        let mut parts = vec![self.iou_token.tensor(), self.mask_tokens.tensor()];
        if prompt.num_sparse() > 0 {
            parts.push(prompt.sparse_tokens.clone());
        }
        let tokens = Tensor::cat(&parts, 0)?;
        let src = (&embedding.projected + &prompt.dense_embedding)?;

        let (hs, src) = self.transformer.forward(&src, image_pe, &tokens)?;
        let iou_out = hs.narrow(0, 0, 1)?;
        let mask_out = hs.narrow(0, 1, self.num_masks)?;

        let up = self.upscale1.forward(&src.reshape((g, g, d))?)?;
        let up = depth_to_space(&up, 2)?;
        let up = Activation::Gelu.apply(&self.upscale_norm.forward(&up)?)?;
        let up = depth_to_space(&self.upscale2.forward(&up)?, 2)?;
        let up = Activation::Gelu.apply(&up)?;
        let m = 4 * g;
        let up = up.reshape((m * m, d / 8))?;

        let hyper = self
            .hypernetworks
            .iter()
            .enumerate()
            .map(|(i, mlp)| mlp.forward(&mask_out.narrow(0, i, 1)?))
            .collect::<Result<Vec<_>>>()?;
        let hyper = Tensor::cat(&hyper, 0)?;
        let logits = hyper
            .matmul(&up.t()?.contiguous()?)?
            .reshape((self.num_masks, m, m))?;
        let iou_scores = self.iou_head.forward(&iou_out)?.squeeze(0)?;
        debug_assert_eq!(iou_scores.dims(), [self.num_masks]);
        Ok(DecoderOutput { logits, iou_scores })
    }
}

impl Parameterized for MaskDecoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "iou_token"), &self.iou_token));
        out.push((join(prefix, "mask_tokens"), &self.mask_tokens));
        self.transformer.visit(&join(prefix, "transformer"), out);
        self.upscale1.visit(&join(prefix, "upscale1"), out);
        self.upscale_norm.visit(&join(prefix, "upscale_norm"), out);
        self.upscale2.visit(&join(prefix, "upscale2"), out);
        for (i, h) in self.hypernetworks.iter().enumerate() {
            h.visit(&join(prefix, &format!("hypernetworks.{i}")), out);
        }
        self.iou_head.visit(&join(prefix, "iou_head"), out);
    }
}
