//! Named, individually freezable model parameters.
//!
//! Every weight in the model is a [`Param`]: a candle [`Var`] plus a role tag
//! and a trainable flag. Frozen parameters are handed to the forward pass as
//! detached tensors, so backprop never produces gradients for them and the
//! optimizer cannot touch them.

use std::sync::atomic::{AtomicBool, Ordering};

use candle_core::{DType, Device, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;

/// What a parameter is, as far as freezing and accounting are concerned.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamRole {
    Base,
    LoraA,
    LoraB,
}

impl ParamRole {
    pub fn is_lora(self) -> bool {
        matches!(self, ParamRole::LoraA | ParamRole::LoraB)
    }
}

#[derive(Debug)]
pub struct Param {
    var: Var,
    role: ParamRole,
    trainable: AtomicBool,
}

impl Param {
    pub fn new(tensor: Tensor, role: ParamRole) -> Result<Self> {
        Ok(Self {
            var: Var::from_tensor(&tensor)?,
            role,
            trainable: AtomicBool::new(false),
        })
    }

    pub fn from_vec(data: Vec<f32>, shape: &[usize], role: ParamRole) -> Result<Self> {
        Self::new(Tensor::from_vec(data, shape, &Device::Cpu)?, role)
    }

    /// The tensor to use in a forward pass. Frozen parameters are detached.
    pub fn tensor(&self) -> Tensor {
        if self.is_trainable() {
            self.var.as_tensor().clone()
        } else {
            self.var.as_tensor().detach()
        }
    }

    pub fn var(&self) -> &Var {
        &self.var
    }

    pub fn role(&self) -> ParamRole {
        self.role
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable.load(Ordering::Relaxed)
    }

    pub fn set_trainable(&self, trainable: bool) {
        self.trainable.store(trainable, Ordering::Relaxed);
    }

    pub fn elem_count(&self) -> usize {
        self.var.elem_count()
    }

    pub fn dims(&self) -> &[usize] {
        self.var.dims()
    }

    /// Replace the stored value, keeping the shape.
    pub fn assign(&self, value: &Tensor) -> Result<()> {
        if value.dims() != self.dims() {
            return Err(crate::Error::Shape(format!(
                "cannot assign {:?} to parameter of shape {:?}",
                value.dims(),
                self.dims()
            )));
        }
        self.var.set(&value.to_dtype(DType::F32)?)?;
        Ok(())
    }

    pub fn to_vec(&self) -> Result<Vec<f32>> {
        Ok(self.var.as_tensor().flatten_all()?.to_vec1::<f32>()?)
    }
}

/// Anything that owns parameters and can enumerate them under dotted paths.
pub trait Parameterized {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>);

    fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out = Vec::new();
        self.visit("", &mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Deterministic initializers driven by a seeded ChaCha stream.
pub(crate) struct Init<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl Init<'_> {
    pub fn normal(&mut self, shape: &[usize], std: f64, role: ParamRole) -> Result<Param> {
        let n: usize = shape.iter().product();
        let dist = Normal::new(0.0f64, std).expect("std must be finite and positive");
        let data = (0..n).map(|_| dist.sample(self.rng) as f32).collect();
        Param::from_vec(data, shape, role)
    }

    pub fn constant(&mut self, shape: &[usize], value: f32) -> Result<Param> {
        let n: usize = shape.iter().product();
        Param::from_vec(vec![value; n], shape, ParamRole::Base)
    }
}
