use candle_core::Tensor;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::nn::{softmax_last, Linear};
use crate::params::{join, Param, Parameterized};

/// Multi-head attention with separate q/k/v/out projections.
///
/// `internal_dim` may be narrower than `dim` (the decoder's cross-attentions
/// run at half width). Query and value projections are the LoRA sites.
#[derive(Debug)]
pub struct Attention {
    pub q_proj: Linear,
    pub k_proj: Linear,
    pub v_proj: Linear,
    pub out_proj: Linear,
    heads: usize,
}

impl Attention {
    pub(crate) fn new(
        rng: &mut ChaCha8Rng,
        dim: usize,
        internal_dim: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(Self {
            q_proj: Linear::new(rng, dim, internal_dim, true)?,
            k_proj: Linear::new(rng, dim, internal_dim, true)?,
            v_proj: Linear::new(rng, dim, internal_dim, true)?,
            out_proj: Linear::new(rng, internal_dim, dim, true)?,
            heads,
        })
    }

    pub fn internal_dim(&self) -> usize {
        self.q_proj.out_dim()
    }

    pub fn is_injected(&self) -> bool {
        self.q_proj.lora.is_some() || self.v_proj.lora.is_some()
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (n, c) = x.dims2()?;
        Ok(x.reshape((n, self.heads, c / self.heads))?
            .transpose(0, 1)?
            .contiguous()?)
    }

    /// `q: [nq, dim]`, `k, v: [nk, dim]` → `[nq, dim]`.
    pub fn forward(&self, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let q = self.split_heads(&self.q_proj.forward(q)?)?;
        let k = self.split_heads(&self.k_proj.forward(k)?)?;
        let v = self.split_heads(&self.v_proj.forward(v)?)?;
        let (_, nq, head_dim) = q.dims3()?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let attn = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        let attn = softmax_last(&attn)?;
        let out = attn
            .matmul(&v)?
            .transpose(0, 1)?
            .reshape((nq, self.internal_dim()))?;
        self.out_proj.forward(&out)
    }
}

impl Parameterized for Attention {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        self.q_proj.visit(&join(prefix, "q_proj"), out);
        self.k_proj.visit(&join(prefix, "k_proj"), out);
        self.v_proj.visit(&join(prefix, "v_proj"), out);
        self.out_proj.visit(&join(prefix, "out_proj"), out);
    }
}
