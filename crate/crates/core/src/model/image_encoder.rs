use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use super::attention::Attention;
use super::config::ModelConfig;
use super::pos;
use crate::error::{Error, Result};
use crate::nn::{Activation, LayerNorm, Linear, Mlp};
use crate::params::{join, Param, Parameterized};

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug)]
pub struct EncoderBlock {
    pub norm1: LayerNorm,
    pub attn: Attention,
    pub norm2: LayerNorm,
    pub mlp: Mlp,
}

impl EncoderBlock {
    fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let d = cfg.encoder_dim;
        Ok(Self {
            norm1: LayerNorm::new(rng, d, 1e-6)?,
            attn: Attention::new(rng, d, d, cfg.encoder_heads)?,
            norm2: LayerNorm::new(rng, d, 1e-6)?,
            mlp: Mlp::new(rng, &[d, d * cfg.encoder_mlp_ratio, d], Activation::Gelu)?,
        })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm1.forward(x)?;
        let x = (x + self.attn.forward(&h, &h, &h)?)?;
        let h = self.norm2.forward(&x)?;
        Ok((&x + self.mlp.forward(&h)?)?)
    }
}

impl Parameterized for EncoderBlock {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.attn.visit(&join(prefix, "attn"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
        self.mlp.visit(&join(prefix, "mlp"), out);
    }
}

/// Output of the image encoder.
#[derive(Debug, Clone)]
pub struct ImageEmbedding {
    /// Encoder features, `[grid², encoder_dim]` row-major over the grid.
    pub features: Tensor,
    /// Neck output consumed by the decoder, `[grid², decoder_dim]`.
    pub projected: Tensor,
    pub grid: usize,
}

impl ImageEmbedding {
    /// Features as `[encoder_dim, grid, grid]`.
    pub fn chw(&self) -> Result<Tensor> {
        let c = self.features.dim(1)?;
        Ok(self
            .features
            .t()?
            .reshape((c, self.grid, self.grid))?
            .contiguous()?)
    }
}

#[derive(Debug)]
pub struct ImageEncoder {
    pub patch_embed: Linear,
    pub blocks: Vec<EncoderBlock>,
    pub neck: Linear,
    pub neck_norm: LayerNorm,
    pos: Tensor,
    image_size: usize,
    patch: usize,
}

impl ImageEncoder {
    pub(crate) fn new(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Result<Self> {
        let p = cfg.patch_size;
        let patch_embed = Linear::new(rng, 3 * p * p, cfg.encoder_dim, true)?;
        let blocks = (0..cfg.encoder_depth)
            .map(|_| EncoderBlock::new(rng, cfg))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            patch_embed,
            blocks,
            neck: Linear::new(rng, cfg.encoder_dim, cfg.decoder_dim, false)?,
            neck_norm: LayerNorm::new(rng, cfg.decoder_dim, 1e-6)?,
            pos: pos::grid_encoding(cfg.grid_size(), cfg.encoder_dim)?,
            image_size: cfg.image_size,
            patch: p,
        })
    }

    /// `image: [3, S, S]` normalized canvas.
    pub fn forward(&self, image: &Tensor) -> Result<ImageEmbedding> {
        let (c, h, w) = image.dims3()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::Config(format!(
                "image encoder expects [3, {s}, {s}], got [{c}, {h}, {w}]",
                s = self.image_size
            )));
        }
        let p = self.patch;
        let g = self.image_size / p;
        // [3, g, p, g, p] -> [g, g, 3, p, p] so each token is one channel-major patch
        let patches = image
            .reshape((3, g, p, g, p))?
            .permute((1, 3, 0, 2, 4))?
            .reshape((g * g, 3 * p * p))?;
        let mut x = self
            .patch_embed
            .forward(&patches)?
            .broadcast_add(&self.pos)?;
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let projected = self.neck_norm.forward(&self.neck.forward(&x)?)?;
        Ok(ImageEmbedding {
            features: x,
            projected,
            grid: g,
        })
    }
}

impl Parameterized for ImageEncoder {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.patch_embed.visit(&join(prefix, "patch_embed"), out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("blocks.{i}")), out);
        }
        self.neck.visit(&join(prefix, "neck"), out);
        self.neck_norm.visit(&join(prefix, "neck_norm"), out);
    }
}
