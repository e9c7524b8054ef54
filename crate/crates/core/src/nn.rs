//! Small layer building blocks shared by the encoder, prompt encoder and decoder.
//!
//! Image-like activations are kept channel-last as `[tokens, channels]` (or
//! `[h, w, channels]` while resampling), so per-pixel convolutions with
//! kernel == stride reduce to a space-to-depth reshuffle followed by a linear map.

use candle_core::{Tensor, D};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::lora::{lora_forward, LoraLayer};
use crate::params::{join, Init, Param, ParamRole, Parameterized};

/// Affine map `y = x·W + b` with `W` stored as `[in, out]`.
///
/// A projection may carry a [`LoraLayer`]; the base weight is never modified
/// by injection.
#[derive(Debug)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    pub lora: Option<LoraLayer>,
}

impl Linear {
    pub(crate) fn new(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, bias: bool) -> Result<Self> {
        let mut init = Init { rng };
        let weight = init.normal(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), ParamRole::Base)?;
        let bias = if bias {
            Some(init.constant(&[d_out], 0.0)?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            lora: None,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.weight.dims()[1]
    }

    /// Applies the layer to `[.., in]`, flattening leading dims.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims
            .last()
            .ok_or_else(|| Error::Shape("scalar input to linear".into()))?;
        if d_in != self.in_dim() {
            return Err(Error::Shape(format!(
                "linear expects {} input features, got {d_in}",
                self.in_dim()
            )));
        }
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let x2 = x.reshape((rows, d_in))?;
        let w = self.weight.tensor();
        let mut y = match &self.lora {
            Some(layer) => lora_forward(layer, &w, &x2)?,
            None => x2.matmul(&w)?,
        };
        if let Some(b) = &self.bias {
            y = y.broadcast_add(&b.tensor())?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.out_dim();
        Ok(y.reshape(out_dims)?)
    }
}

impl Parameterized for Linear {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b));
        }
        if let Some(l) = &self.lora {
            l.visit(&join(prefix, "lora"), out);
        }
    }
}

#[derive(Debug)]
pub struct LayerNorm {
    pub weight: Param,
    pub bias: Param,
    eps: f32,
}

impl LayerNorm {
    pub(crate) fn new(rng: &mut ChaCha8Rng, dim: usize, eps: f32) -> Result<Self> {
        let mut init = Init { rng };
        Ok(Self {
            weight: init.constant(&[dim], 1.0)?,
            bias: init.constant(&[dim], 0.0)?,
            eps,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(candle_nn::ops::layer_norm_slow(
            x,
            &self.weight.tensor(),
            &self.bias.tensor(),
            self.eps,
        )?)
    }
}

impl Parameterized for LayerNorm {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "weight"), &self.weight));
        out.push((join(prefix, "bias"), &self.bias));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Gelu => x.gelu_erf()?,
        })
    }
}

/// Stack of linear layers with an activation between (not after) them.
#[derive(Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    act: Activation,
}

impl Mlp {
    pub(crate) fn new(rng: &mut ChaCha8Rng, dims: &[usize], act: Activation) -> Result<Self> {
        let layers = dims
            .windows(2)
            .map(|w| Linear::new(rng, w[0], w[1], true))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers, act })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = self.act.apply(&h)?;
            }
        }
        Ok(h)
    }
}

impl Parameterized for Mlp {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), out);
        }
    }
}

/// `[h, w, c]` → `[h/f · w/f, f·f·c]`, grouping each f×f cell into one token.
pub fn space_to_depth(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, c) = x.dims3()?;
    if h % factor != 0 || w % factor != 0 {
        return Err(Error::Shape(format!(
            "{h}x{w} grid not divisible by {factor}"
        )));
    }
    let (ho, wo) = (h / factor, w / factor);
    Ok(x.reshape((ho, factor, wo, factor, c))?
        .permute((0, 2, 1, 3, 4))?
        .reshape((ho * wo, factor * factor * c))?)
}

/// `[h, w, f·f·c]` → `[h·f, w·f, c]`, the inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (h, w, cc) = x.dims3()?;
    let c = cc / (factor * factor);
    if c * factor * factor != cc {
        return Err(Error::Shape(format!(
            "{cc} channels not divisible by {}",
            factor * factor
        )));
    }
    Ok(x.reshape((h, w, factor, factor, c))?
        .permute((0, 2, 1, 3, 4))?
        .reshape((h * factor, w * factor, c))?)
}

/// Softmax over the last dimension, built from differentiable primitives.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::softmax(x, D::Minus1)?)
}
