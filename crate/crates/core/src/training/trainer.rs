use std::path::Path;

use candle_core::{backprop::GradStore, DType, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{downsample_target, lr_at, multi_mask_loss, sample_correction_points};
use crate::checkpoint::AdapterCheckpoint;
use crate::data::PreparedSample;
use crate::error::{Error, Result};
use crate::inference::{predict, predict_refined, select_level, InferenceConfig};
use crate::lora::{set_trainability, Stage};
use crate::model::{DecoderOutput, ImageEmbedding, MaskPrediction, PromptSet, SamModel};
use crate::params::Parameterized;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub batch_size: usize,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub seed: u64,
    pub lr_power: f64,
    /// Prompt iterations per stage-2 step before the supervised forward.
    pub num_inner_iters: usize,
    pub dice_smooth: f64,
    /// Hard cap on optimizer steps; the schedule decays over the capped length.
    pub max_steps: Option<usize>,
    /// Weight of the auxiliary score-to-IoU regression; 0 disables it.
    pub iou_loss_weight: f64,
    /// Supervise every stage-2 forward instead of only the last one.
    pub per_iteration_loss: bool,
    /// Stage 2 also trains the prompt encoder (otherwise decoder adapters only).
    pub train_prompt_encoder: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 5e-3,
            batch_size: 2,
            epochs_stage1: 160,
            epochs_stage2: 320,
            seed: 0,
            lr_power: 0.9,
            num_inner_iters: 1,
            dice_smooth: 1.0,
            max_steps: None,
            iou_loss_weight: 1.0,
            per_iteration_loss: false,
            train_prompt_encoder: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("training: {m}")));
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.epochs_stage1 == 0 || self.epochs_stage2 == 0 {
            return bad("epochs must be positive");
        }
        if !(self.lr_power > 0.0) {
            return bad("lr_power must be positive");
        }
        if !(self.dice_smooth > 0.0) {
            return bad("dice_smooth must be positive");
        }
        if self.max_steps == Some(0) {
            return bad("max_steps must be positive");
        }
        if !(self.iou_loss_weight >= 0.0) {
            return bad("iou_loss_weight must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub curve: Vec<EpochLoss>,
    pub steps: usize,
    pub checkpoint: AdapterCheckpoint,
}

pub fn loss_curve_csv(curve: &[EpochLoss]) -> String {
    let mut s = String::from("epoch,mean_loss,lr\n");
    for e in curve {
        s.push_str(&format!("{},{:.9},{:.9e}\n", e.epoch, e.mean_loss, e.lr));
    }
    s
}

pub fn write_loss_csv(path: &Path, curve: &[EpochLoss]) -> Result<()> {
    std::fs::write(path, loss_curve_csv(curve))?;
    Ok(())
}

/// Regression of each level's score to the IoU of its own binarized logits
/// with the target, at logit resolution.
fn iou_aux_loss(out: &DecoderOutput, target: &Tensor) -> Result<Tensor> {
    let levels = out.logits.dim(0)?;
    let pred = out.logits.detach().gt(0.0)?.to_dtype(DType::F32)?;
    let gt = target.unsqueeze(0)?.broadcast_as(pred.shape())?;
    let inter = (&pred * &gt)?.sum((1, 2))?;
    let union = ((&pred + &gt)?.sum((1, 2))? - &inter)?;
    let true_iou: Vec<f32> = inter
        .to_vec1::<f32>()?
        .iter()
        .zip(union.to_vec1::<f32>()?)
        .map(|(&i, u)| if u > 0.0 { i / u } else { 1.0 })
        .collect();
    let t = Tensor::from_vec(true_iou, levels, target.device())?;
    Ok((&out.iou_scores - t)?.sqr()?.mean_all()?)
}

pub(super) struct Supervisor<'a> {
    pub(super) cfg: &'a TrainConfig,
}

impl Supervisor<'_> {
    pub(super) fn loss(&self, out: &DecoderOutput, target: &Tensor) -> Result<Tensor> {
        let mut loss = multi_mask_loss(&out.logits, target, self.cfg.dice_smooth)?;
        if self.cfg.iou_loss_weight > 0.0 {
            loss = (loss + (iou_aux_loss(out, target)? * self.cfg.iou_loss_weight)?)?;
        }
        Ok(loss)
    }
}

struct Optimizer {
    params: Vec<(String, Var)>,
}

fn trainable(model: &SamModel) -> Vec<(String, Var)> {
    model
        .named_params()
        .into_iter()
        .filter(|(_, p)| p.is_trainable())
        .map(|(n, p)| (n, p.var().clone()))
        .collect()
}

impl Optimizer {
    /// Plain SGD; returns per-parameter gradient norms.
    fn step(&self, grads: &GradStore, lr: f64) -> Result<Vec<(String, f64)>> {
        let mut norms = Vec::with_capacity(self.params.len());
        for (name, var) in &self.params {
            let Some(g) = grads.get(var.as_tensor()) else {
                norms.push((name.clone(), 0.0));
                continue;
            };
            let norm = g.sqr()?.sum_all()?.to_scalar::<f32>()?.sqrt() as f64;
            if !norm.is_finite() {
                return Err(Error::Numerical(format!(
                    "non-finite gradient for {name} at lr {lr:.3e}"
                )));
            }
            norms.push((name.clone(), norm));
            let updated = (var.as_tensor() - (g * lr)?)?;
            var.set(&updated)?;
        }
        Ok(norms)
    }
}

fn diagnostic(loss: f64, lr: f64, norms: &[(String, f64)]) -> Error {
    let mut worst: Vec<_> = norms.to_vec();
    worst.sort_by(|a, b| b.1.total_cmp(&a.1));
    let listed: Vec<String> = worst
        .iter()
        .take(5)
        .map(|(n, g)| format!("{n}={g:.3e}"))
        .collect();
    Error::Numerical(format!(
        "loss became {loss} (last lr {lr:.3e}; largest previous grad norms: {})",
        listed.join(", ")
    ))
}

/// Shared epoch/batch loop: `step_loss(index, rng)` returns one sample's loss.
fn run<F>(
    model: &SamModel,
    n: usize,
    epochs: usize,
    cfg: &TrainConfig,
    mut step_loss: F,
) -> Result<(Vec<EpochLoss>, usize)>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> Result<Tensor>,
{
    let opt = Optimizer {
        params: trainable(model),
    };
    if opt.params.is_empty() {
        return Err(Error::Validation("no trainable parameters".into()));
    }
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total = (epochs * steps_per_epoch).min(cfg.max_steps.unwrap_or(usize::MAX));
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut prompt_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut curve = Vec::new();
    let mut step = 0;
    let mut last_norms: Vec<(String, f64)> = Vec::new();
    'epochs: for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut order_rng);
        let (mut sum, mut count, mut lr) = (0.0, 0, cfg.base_lr);
        for batch in order.chunks(cfg.batch_size) {
            if step >= total {
                break;
            }
            lr = lr_at(step, total, cfg);
            let mut batch_loss: Option<Tensor> = None;
            for &i in batch {
                let l = step_loss(i, &mut prompt_rng)?;
                batch_loss = Some(match batch_loss {
                    Some(acc) => (acc + l)?,
                    None => l,
                });
            }
            let loss = (batch_loss.expect("non-empty batch") / batch.len() as f64)?;
            let value = loss.to_scalar::<f32>()? as f64;
            if !value.is_finite() {
                return Err(diagnostic(value, lr, &last_norms));
            }
            let grads = loss.backward()?;
            last_norms = opt.step(&grads, lr)?;
            sum += value;
            count += 1;
            step += 1;
        }
        if count > 0 {
            curve.push(EpochLoss {
                epoch,
                mean_loss: sum / count as f64,
                lr,
            });
            log::debug!("epoch {epoch}: loss {:.5}, lr {lr:.3e}", sum / count as f64);
        }
        if step >= total {
            break 'epochs;
        }
    }
    Ok((curve, step))
}

fn targets(model: &SamModel, samples: &[PreparedSample]) -> Result<Vec<Tensor>> {
    let m = model.config().mask_prompt_size;
    samples
        .iter()
        .map(|s| downsample_target(&s.gt_canvas, m))
        .collect()
}

fn check_inputs(model: &SamModel, samples: &[PreparedSample], cfg: &TrainConfig) -> Result<()> {
    cfg.validate()?;
    if model.injection_plan().is_none() {
        return Err(Error::Validation("training needs an injected model".into()));
    }
    if samples.is_empty() {
        return Err(Error::Validation("training set is empty".into()));
    }
    let s = model.config().image_size;
    if let Some(bad) = samples
        .iter()
        .find(|p| p.gt_canvas.width != s || p.gt_canvas.height != s)
    {
        return Err(Error::Shape(format!(
            "sample canvas {}x{} does not match model size {s}",
            bad.gt_canvas.width, bad.gt_canvas.height
        )));
    }
    Ok(())
}

/// LoRA fine-tuning with None prompts; only adapter matrices change.
pub fn train_stage1(
    model: &SamModel,
    samples: &[PreparedSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_inputs(model, samples, cfg)?;
    set_trainability(model, Stage::Lora, cfg.train_prompt_encoder);
    let targets = targets(model, samples)?;
    let sup = Supervisor { cfg };
    let none = PromptSet::none();
    let (curve, steps) = run(model, samples.len(), cfg.epochs_stage1, cfg, |i, _| {
        let out = model.forward_raw(&samples[i].canvas, &none)?;
        sup.loss(&out, &targets[i])
    })?;
    Ok(TrainReport {
        curve,
        steps,
        checkpoint: AdapterCheckpoint::from_model(model, Stage::Lora)?,
    })
}

/// Promptable fine-tuning: per sample, `num_inner_iters` prompt rounds
/// (best level's logits as mask prompt plus corrective clicks), then a
/// supervised forward. The frozen image embedding is computed once.
pub fn train_stage2(
    model: &SamModel,
    samples: &[PreparedSample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    check_inputs(model, samples, cfg)?;
    set_trainability(model, Stage::Promptable, cfg.train_prompt_encoder);
    let targets = targets(model, samples)?;
    let embeddings: Vec<ImageEmbedding> = samples
        .iter()
        .map(|s| model.encode_image(&s.canvas))
        .collect::<Result<_>>()?;
    let size = model.config().image_size;
    let sup = Supervisor { cfg };
    let (curve, steps) = run(model, samples.len(), cfg.epochs_stage2, cfg, |i, rng| {
        let mut prompts = PromptSet::none();
        let mut total: Option<Tensor> = None;
        for t in 0..=cfg.num_inner_iters {
            let out = model.forward_with_embedding(&embeddings[i], &prompts)?;
            if cfg.per_iteration_loss || t == cfg.num_inner_iters {
                let l = sup.loss(&out, &targets[i])?;
                total = Some(match total {
                    Some(acc) => (acc + l)?,
                    None => l,
                });
            }
            if t == cfg.num_inner_iters {
                break;
            }
            let pred = MaskPrediction::from_output(&out, size, 0.0)?;
            let idx = select_level(&pred.iou_scores)?;
            let clicks = sample_correction_points(&pred.masks[idx], &samples[i].gt_canvas, rng);
            prompts = PromptSet {
                points: clicks.to_prompts(),
                boxes: Vec::new(),
                mask_logits: Some(out.logits.get(idx)?.detach()),
            };
        }
        let total = total.expect("final iteration is always supervised");
        if cfg.per_iteration_loss {
            Ok((total / (cfg.num_inner_iters + 1) as f64)?)
        } else {
            Ok(total)
        }
    })?;
    Ok(TrainReport {
        curve,
        steps,
        checkpoint: AdapterCheckpoint::from_model(model, Stage::Promptable)?,
    })
}

/// Mean Dice of the selected mask against the canvas ground truth; plain
/// prediction when `refine` is `None`.
pub fn mean_dice(
    model: &SamModel,
    samples: &[PreparedSample],
    refine: Option<&InferenceConfig>,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Validation("no samples".into()));
    }
    let mut sum = 0.0;
    for s in samples {
        let r = match refine {
            Some(c) => predict_refined(model, &s.canvas, c)?,
            None => predict(model, &s.canvas)?,
        };
        sum += r.selected_mask.dice(&s.gt_canvas);
    }
    Ok(sum / samples.len() as f64)
}
