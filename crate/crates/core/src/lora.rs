//! Low-rank adaptation of frozen projections.
//!
//! A frozen weight `W0 ∈ ℝ^{d×k}` (input dim `d`, output dim `k`) is shadowed
//! by `B ∈ ℝ^{d×r}` and `A ∈ ℝ^{r×k}`; the adapted map is
//! `h = x·W0 + x·B·A`. `B` starts at zero so an injected model is exactly the
//! base model until the first update. Adapters wrap only the query and value
//! projections of attention modules in the image encoder and mask decoder;
//! the prompt encoder is never injected.

use std::collections::BTreeSet;

use candle_core::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Component, ModelConfig, SamModel};
use crate::params::{join, Init, Param, ParamRole, Parameterized};

/// Default standard deviation of the Gaussian initialisation of `A`.
pub const DEFAULT_INIT_STD: f64 = 5.0;
/// Default adapter rank.
pub const DEFAULT_RANK: usize = 4;

#[derive(Debug)]
pub struct LoraLayer {
    /// `[d, r]`, zero at construction.
    pub b: Param,
    /// `[r, k]`, Gaussian at construction.
    pub a: Param,
    pub rank: usize,
    /// Multiplier on `B·A`; 1.0 keeps the update at unit scale.
    pub scale: f64,
}

impl LoraLayer {
    pub fn in_dim(&self) -> usize {
        self.b.dims()[0]
    }

    pub fn out_dim(&self) -> usize {
        self.a.dims()[1]
    }

    pub fn num_params(&self) -> usize {
        self.rank * (self.in_dim() + self.out_dim())
    }

    /// `scale · B·A`, the dense update `ΔW`.
    pub fn delta_weight(&self) -> Result<Tensor> {
        Ok((self.b.tensor().matmul(&self.a.tensor())? * self.scale)?)
    }
}

impl Parameterized for LoraLayer {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param)>) {
        out.push((join(prefix, "a"), &self.a));
        out.push((join(prefix, "b"), &self.b));
    }
}

/// Builds a `d × k` adapter of rank `r`: `B = 0`, `A ~ N(0, std²)`.
pub fn make_lora(
    d: usize,
    k: usize,
    r: usize,
    std: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LoraLayer> {
    if r == 0 {
        return Err(Error::Config("LoRA rank must be at least 1".into()));
    }
    let limit = d.min(k);
    if r > limit {
        return Err(Error::Config(format!(
            "LoRA rank {r} exceeds min(d, k) = {limit}"
        )));
    }
    if r * 4 > limit {
        log::warn!("LoRA rank {r} is large relative to min(d, k) = {limit}");
    }
    if !(std.is_finite() && std > 0.0) {
        return Err(Error::Config(format!(
            "LoRA init std must be positive, got {std}"
        )));
    }
    let a = Init { rng }.normal(&[r, k], std, ParamRole::LoraA)?;
    let b = Param::from_vec(vec![0.0; d * r], &[d, r], ParamRole::LoraB)?;
    Ok(LoraLayer {
        b,
        a,
        rank: r,
        scale: 1.0,
    })
}

/// `x·W0 + scale·(x·B)·A` for `x: [n, d]`, never forming the `d × k` update.
pub fn lora_forward(layer: &LoraLayer, w0: &Tensor, x: &Tensor) -> Result<Tensor> {
    let (_, d) = x.dims2()?;
    let (wd, wk) = w0.dims2()?;
    if d != wd || wd != layer.in_dim() || wk != layer.out_dim() {
        return Err(Error::Shape(format!(
            "lora_forward: x [_, {d}], W0 [{wd}, {wk}], adapter [{}, {}]",
            layer.in_dim(),
            layer.out_dim()
        )));
    }
    let base = x.matmul(w0)?;
    let low = x.matmul(&layer.b.tensor())?.matmul(&layer.a.tensor())?;
    let low = if layer.scale == 1.0 {
        low
    } else {
        (low * layer.scale)?
    };
    Ok((base + low)?)
}

/// `W0 + scale·B·A`.
pub fn merge_weights(w0: &Tensor, layer: &LoraLayer) -> Result<Tensor> {
    let (wd, wk) = w0.dims2()?;
    if wd != layer.in_dim() || wk != layer.out_dim() {
        return Err(Error::Shape(format!(
            "merge: W0 [{wd}, {wk}] vs adapter [{}, {}]",
            layer.in_dim(),
            layer.out_dim()
        )));
    }
    Ok((w0 + layer.delta_weight()?)?)
}

/// Which projections of an attention module carry adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Value,
}

/// Always query and value; key and output projections are never wrapped.
pub const PROJECTIONS: [Projection; 2] = [Projection::Query, Projection::Value];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InjectionPlan {
    pub targets: BTreeSet<Component>,
    pub rank: usize,
    /// Standard deviation of the Gaussian used for `A`.
    pub init_std: f64,
    pub scale: f64,
    /// Seed of the stream `A` is drawn from.
    pub seed: u64,
}

impl Default for InjectionPlan {
    fn default() -> Self {
        Self {
            targets: [Component::ImageEncoder, Component::MaskDecoder].into(),
            rank: DEFAULT_RANK,
            init_std: DEFAULT_INIT_STD,
            scale: 1.0,
            seed: 0,
        }
    }
}

impl InjectionPlan {
    pub fn with_targets(targets: impl IntoIterator<Item = Component>) -> Self {
        Self {
            targets: targets.into_iter().collect(),
            ..Self::default()
        }
    }

    pub fn projections(&self) -> &'static [Projection] {
        &PROJECTIONS
    }

    pub fn validate(&self) -> Result<()> {
        if self.targets.is_empty() {
            return Err(Error::Validation("injection plan has no targets".into()));
        }
        if self.targets.contains(&Component::PromptEncoder) {
            return Err(Error::Validation(
                "the prompt encoder has no attention and is never injected".into(),
            ));
        }
        if self.rank == 0 {
            return Err(Error::Validation("LoRA rank must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct InjectionSummary {
    pub wrapped_attentions: usize,
    pub lora_pairs: usize,
}

/// Wraps the query and value projections of every attention module inside
/// the plan's targets. Leaves base weights untouched and frozen; the new
/// adapters start out trainable.
pub fn inject(model: &mut SamModel, plan: &InjectionPlan) -> Result<InjectionSummary> {
    plan.validate()?;
    if model.injection.is_some()
        || model
            .attention_sites()
            .iter()
            .any(|(_, _, a)| a.is_injected())
    {
        return Err(Error::AlreadyInjected);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let mut summary = InjectionSummary {
        wrapped_attentions: 0,
        lora_pairs: 0,
    };
    for (component, _path, attn) in model.attention_sites_mut() {
        if !plan.targets.contains(&component) {
            continue;
        }
        for proj in PROJECTIONS {
            let linear = match proj {
                Projection::Query => &mut attn.q_proj,
                Projection::Value => &mut attn.v_proj,
            };
            let mut layer = make_lora(
                linear.in_dim(),
                linear.out_dim(),
                plan.rank,
                plan.init_std,
                &mut rng,
            )?;
            layer.scale = plan.scale;
            linear.lora = Some(layer);
            summary.lora_pairs += 1;
        }
        summary.wrapped_attentions += 1;
    }
    model.injection = Some(plan.clone());
    set_stage_trainability(model, Stage::Lora);
    Ok(summary)
}

/// Training stage, which decides the trainable parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    /// Only adapter matrices (encoder and decoder) train.
    Lora,
    /// Image encoder and its adapters frozen; prompt encoder and decoder adapters train.
    Promptable,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Lora => "lora",
            Stage::Promptable => "promptable",
        })
    }
}

pub fn set_stage_trainability(model: &SamModel, stage: Stage) {
    set_trainability(model, stage, true);
}

/// Like [`set_stage_trainability`]; `train_prompt_encoder = false` selects the
/// stricter promptable-stage reading where only decoder adapters train.
pub fn set_trainability(model: &SamModel, stage: Stage, train_prompt_encoder: bool) {
    for (path, p) in model.named_params() {
        let component = Component::of_path(&path);
        let trainable = match stage {
            Stage::Lora => p.role().is_lora(),
            Stage::Promptable => match component {
                Some(Component::MaskDecoder) => p.role().is_lora(),
                Some(Component::PromptEncoder) => train_prompt_encoder,
                _ => false,
            },
        };
        p.set_trainable(trainable);
    }
}

/// Makes every parameter trainable (used to fit synthetic base weights).
pub fn unfreeze_all(model: &SamModel) {
    for (_, p) in model.named_params() {
        p.set_trainable(true);
    }
}

pub fn freeze_all(model: &SamModel) {
    for (_, p) in model.named_params() {
        p.set_trainable(false);
    }
}

pub fn trainable_parameter_count(model: &SamModel) -> usize {
    model
        .named_params()
        .iter()
        .filter(|(_, p)| p.is_trainable())
        .map(|(_, p)| p.elem_count())
        .sum()
}

/// Adapter parameters present in the model, optionally restricted to one component.
pub fn lora_parameter_count(model: &SamModel, component: Option<Component>) -> usize {
    model
        .named_params()
        .iter()
        .filter(|(path, p)| {
            p.role().is_lora() && component.is_none_or(|c| Component::of_path(path) == Some(c))
        })
        .map(|(_, p)| p.elem_count())
        .sum()
}

/// Closed-form adapter size `Σ r·(d + k)` over the wrapped projections,
/// derived from the configuration alone (no weights are built).
pub fn planned_lora_parameter_count(cfg: &ModelConfig, plan: &InjectionPlan) -> usize {
    let r = plan.rank;
    let mut total = 0;
    if plan.targets.contains(&Component::ImageEncoder) {
        let e = cfg.encoder_dim;
        total += cfg.encoder_depth * PROJECTIONS.len() * r * (e + e);
    }
    if plan.targets.contains(&Component::MaskDecoder) {
        let d = cfg.decoder_dim;
        let c = cfg.cross_attention_dim();
        let self_attn = PROJECTIONS.len() * r * (d + d);
        let cross_attn = PROJECTIONS.len() * r * (d + c);
        total += cfg.decoder_depth * (self_attn + 2 * cross_attn) + cross_attn;
    }
    total
}

/// Folds every adapter into its base weight and removes the adapters. The
/// result is a plain model whose forward matches the adapted one.
pub fn merge_into_base(model: &mut SamModel) -> Result<usize> {
    let mut merged = 0;
    for (_, _, attn) in model.attention_sites_mut() {
        for linear in [&mut attn.q_proj, &mut attn.v_proj] {
            if let Some(layer) = linear.lora.take() {
                let w = merge_weights(linear.weight.var().as_tensor(), &layer)?;
                linear.weight.assign(&w)?;
                merged += 1;
            }
        }
    }
    model.injection = None;
    freeze_all(model);
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn b_starts_at_zero_and_a_is_seeded() {
        let l = make_lora(8, 8, 4, DEFAULT_INIT_STD, &mut rng(0)).unwrap();
        assert!(l.b.to_vec().unwrap().iter().all(|&v| v == 0.0));
        assert_eq!(l.b.dims(), &[8, 4]);
        assert_eq!(l.a.dims(), &[4, 8]);
        let again = make_lora(8, 8, 4, DEFAULT_INIT_STD, &mut rng(0)).unwrap();
        assert_eq!(l.a.to_vec().unwrap(), again.a.to_vec().unwrap());
    }

    #[test]
    fn a_matches_requested_gaussian() {
        let l = make_lora(512, 512, 4, DEFAULT_INIT_STD, &mut rng(0)).unwrap();
        let a = l.a.to_vec().unwrap();
        let n = a.len() as f64;
        let mean = a.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = a.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.5, "mean {mean}");
        assert!((var.sqrt() - 5.0).abs() < 0.5, "std {}", var.sqrt());
    }

    #[test]
    fn rank_limits() {
        assert!(make_lora(4, 8, 0, 1.0, &mut rng(0)).is_err());
        assert!(make_lora(4, 8, 5, 1.0, &mut rng(0)).is_err());
        assert!(make_lora(4, 8, 4, 1.0, &mut rng(0)).is_ok());
    }

    #[test]
    fn hand_computed_forward() {
        let dev = Device::Cpu;
        let layer = LoraLayer {
            b: Param::from_vec(vec![1.0, 1.0], &[2, 1], ParamRole::LoraB).unwrap(),
            a: Param::from_vec(vec![2.0, 3.0], &[1, 2], ParamRole::LoraA).unwrap(),
            rank: 1,
            scale: 1.0,
        };
        let w0 = Tensor::zeros((2, 2), candle_core::DType::F32, &dev).unwrap();
        let x = Tensor::new(&[[1f32, 2.0]], &dev).unwrap();
        let y = lora_forward(&layer, &w0, &x).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), vec![vec![6.0, 9.0]]);
        // dense oracle: ΔW = B·A = [[2,3],[2,3]]
        let merged = merge_weights(&w0, &layer).unwrap();
        assert_eq!(
            merged.to_vec2::<f32>().unwrap(),
            vec![vec![2.0, 3.0], vec![2.0, 3.0]]
        );
    }

    #[test]
    fn fresh_adapter_is_identity_and_forward_is_linear() {
        let dev = Device::Cpu;
        let layer = make_lora(6, 5, 2, DEFAULT_INIT_STD, &mut rng(3)).unwrap();
        let w0 = Tensor::randn(0f32, 1.0, (6, 5), &dev).unwrap();
        let x = Tensor::randn(0f32, 1.0, (4, 6), &dev).unwrap();
        let y = lora_forward(&layer, &w0, &x).unwrap();
        let plain = x.matmul(&w0).unwrap();
        assert_eq!(y.to_vec2::<f32>().unwrap(), plain.to_vec2::<f32>().unwrap());
        assert_eq!(
            merge_weights(&w0, &layer)
                .unwrap()
                .to_vec2::<f32>()
                .unwrap(),
            w0.to_vec2::<f32>().unwrap()
        );

        layer
            .b
            .assign(&Tensor::randn(0f32, 1.0, (6, 2), &dev).unwrap())
            .unwrap();
        let y = lora_forward(&layer, &w0, &x).unwrap();
        let y3 = lora_forward(&layer, &w0, &(&x * 3.0).unwrap()).unwrap();
        let diff = ((y * 3.0).unwrap() - y3)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap();
        assert!(diff.to_scalar::<f32>().unwrap() < 1e-3);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let dev = Device::Cpu;
        let layer = make_lora(4, 4, 1, 1.0, &mut rng(0)).unwrap();
        let w0 = Tensor::zeros((4, 4), candle_core::DType::F32, &dev).unwrap();
        let x = Tensor::zeros((2, 3), candle_core::DType::F32, &dev).unwrap();
        assert!(matches!(
            lora_forward(&layer, &w0, &x),
            Err(Error::Shape(_))
        ));
        let w_bad = Tensor::zeros((4, 5), candle_core::DType::F32, &dev).unwrap();
        assert!(merge_weights(&w_bad, &layer).is_err());
    }

    #[test]
    fn merge_then_subtract_recovers_base() {
        let dev = Device::Cpu;
        let layer = make_lora(16, 12, 3, DEFAULT_INIT_STD, &mut rng(9)).unwrap();
        layer
            .b
            .assign(&Tensor::randn(0f32, 0.1, (16, 3), &dev).unwrap())
            .unwrap();
        let w0 = Tensor::randn(0f32, 1.0, (16, 12), &dev).unwrap();
        let merged = merge_weights(&w0, &layer).unwrap();
        let back = (merged - layer.delta_weight().unwrap()).unwrap();
        let err = (back - &w0).unwrap().abs().unwrap().max_all().unwrap();
        assert!(err.to_scalar::<f32>().unwrap() <= 1e-6);
    }

    #[test]
    fn plan_validation() {
        assert!(InjectionPlan::with_targets([]).validate().is_err());
        assert!(InjectionPlan::with_targets([Component::PromptEncoder])
            .validate()
            .is_err());
        assert!(InjectionPlan::default().validate().is_ok());
        assert_eq!(InjectionPlan::default().projections(), &PROJECTIONS);
    }
}
