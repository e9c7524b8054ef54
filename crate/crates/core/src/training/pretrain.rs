//! Full-parameter fitting of the base weights on generic object scenes.
//!
//! Stands in for a large-scale pretrained checkpoint at desk scale: the base
//! learns class-agnostic "segment every object" behaviour, and plate-specific
//! behaviour is left to the adapters.

use candle_core::{Tensor, Var};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::trainer::Supervisor;
use super::{downsample_target, lr_at, TrainConfig};
use crate::data::{synthesize_dataset, Normalization, PreparedSample, SceneKind, SynthConfig};
use crate::error::{Error, Result};
use crate::lora::{freeze_all, unfreeze_all};
use crate::model::{ModelConfig, PromptSet, SamModel};
use crate::params::Parameterized;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub scenes: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Weight of the mean squared logit, keeping the base's logits unsaturated.
    pub logit_penalty: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            scenes: 256,
            steps: 1500,
            batch_size: 2,
            lr: 2e-3,
            seed: 1000,
            logit_penalty: 0.01,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scenes == 0 || self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("pretraining: counts must be positive".into()));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config("pretraining: lr must be positive".into()));
        }
        Ok(())
    }
}

/// Fits every base weight of an uninjected model with Adam and
/// leaves the model fully frozen. Returns the per-step loss.
pub fn pretrain_base(
    model: &SamModel,
    samples: &[PreparedSample],
    cfg: &PretrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if model.injection_plan().is_some() {
        return Err(Error::Validation(
            "pretraining expects a model without adapters".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::Validation("pretraining set is empty".into()));
    }
    let m = model.config().mask_prompt_size;
    let targets: Vec<Tensor> = samples
        .iter()
        .map(|s| downsample_target(&s.gt_canvas, m))
        .collect::<Result<_>>()?;
    unfreeze_all(model);
    let vars: Vec<Var> = model
        .named_params()
        .iter()
        .map(|(_, p)| p.var().clone())
        .collect();
    let mut opt = AdamW::new(
        vars,
        ParamsAdamW {
            lr: cfg.lr,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        },
    )?;
    let schedule = TrainConfig {
        base_lr: cfg.lr,
        ..TrainConfig::default()
    };
    let sup_cfg = TrainConfig::default();
    let sup = Supervisor { cfg: &sup_cfg };
    let none = PromptSet::none();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if order.is_empty() {
                order = (0..samples.len()).collect();
                order.shuffle(&mut rng);
            }
            batch.push(order.pop().expect("refilled above"));
        }
        let mut total: Option<Tensor> = None;
        for &i in &batch {
            let out = model.forward_raw(&samples[i].canvas, &none)?;
            let mut l = sup.loss(&out, &targets[i])?;
            if cfg.logit_penalty > 0.0 {
                l = (l + (out.logits.sqr()?.mean_all()? * cfg.logit_penalty)?)?;
            }
            total = Some(match total {
                Some(t) => (t + l)?,
                None => l,
            });
        }
        let loss = (total.expect("non-empty batch") / batch.len() as f64)?;
        let value = loss.to_scalar::<f32>()? as f64;
        if !value.is_finite() {
            freeze_all(model);
            return Err(Error::Numerical(format!(
                "pretraining loss became {value} at step {step}"
            )));
        }
        opt.set_learning_rate(lr_at(step, cfg.steps, &schedule));
        opt.backward_step(&loss)?;
        losses.push(value);
        if step % 50 == 0 {
            log::debug!("pretrain step {step}: loss {value:.4}");
        }
    }
    freeze_all(model);
    Ok(losses)
}

/// Builds a model from `config` and pretrains it on freshly synthesized
/// object scenes. Deterministic in `config.base_seed` and `cfg.seed`.
pub fn foundation_model(config: ModelConfig, cfg: &PretrainConfig) -> Result<(SamModel, Vec<f64>)> {
    let scenes = synthesize_dataset(
        cfg.scenes,
        cfg.seed,
        &SynthConfig {
            kind: SceneKind::Objects,
            ..SynthConfig::default()
        },
    )?;
    let prepared: Vec<PreparedSample> = scenes
        .iter()
        .map(|s| PreparedSample::new(s, config.image_size, &Normalization::default()))
        .collect::<Result<_>>()?;
    let model = SamModel::new(config)?;
    let losses = pretrain_base(&model, &prepared, cfg)?;
    Ok((model, losses))
}
