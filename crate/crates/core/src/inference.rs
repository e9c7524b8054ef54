//! None-prompt prediction with score-based level selection, and iterative
//! mask-prompt refinement.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::connected_components;
use crate::mask::BinaryMask;
use crate::model::{MaskPrediction, PointLabel, PointPrompt, PromptSet, SamModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Refinement iterations after the initial None-prompt pass.
    pub refine_iters: usize,
    pub binarize_threshold: f32,
    /// Feed a 0/1 mask instead of raw logits as the refinement prompt.
    pub binarize_prompt: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            refine_iters: 1,
            binarize_threshold: 0.0,
            binarize_prompt: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PredictionResult {
    pub selected_mask: BinaryMask,
    pub selected_score: f32,
    pub selected_level: usize,
    pub all_levels: MaskPrediction,
    /// Forward passes spent on this prediction.
    pub iterations_used: usize,
}

impl PredictionResult {
    fn new(all_levels: MaskPrediction, iterations_used: usize) -> Result<Self> {
        let selected_level = select_level(&all_levels.iou_scores)?;
        Ok(Self {
            selected_mask: all_levels.masks[selected_level].clone(),
            selected_score: all_levels.iou_scores[selected_level],
            selected_level,
            all_levels,
            iterations_used,
        })
    }

    pub fn selected_logits(&self) -> Result<Tensor> {
        self.all_levels.level_logits(self.selected_level)
    }
}

/// Index of the highest score; ties go to the lowest index.
pub fn select_level(scores: &[f32]) -> Result<usize> {
    if scores.is_empty() {
        return Err(Error::Validation("no scores to select from".into()));
    }
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] || (scores[best].is_nan() && !s.is_nan()) {
            best = i;
        }
    }
    Ok(best)
}

/// One forward with an empty prompt. `image` is a preprocessed `[3, S, S]` canvas.
pub fn predict(model: &SamModel, image: &Tensor) -> Result<PredictionResult> {
    predict_with_prompts(model, image, &PromptSet::none())
}

pub fn predict_with_prompts(
    model: &SamModel,
    image: &Tensor,
    prompts: &PromptSet,
) -> Result<PredictionResult> {
    let out = model.forward_raw(image, prompts)?;
    let pred = MaskPrediction::from_output(&out, model.config().image_size, 0.0)?;
    PredictionResult::new(pred, 1)
}

/// Initial None-prompt pass followed by `refine_iters` passes, each prompted
/// only with the previous best level's logits. The image is encoded once.
pub fn predict_refined(
    model: &SamModel,
    image: &Tensor,
    cfg: &InferenceConfig,
) -> Result<PredictionResult> {
    let size = model.config().image_size;
    let embedding = model.encode_image(image)?;
    let mut prompts = PromptSet::none();
    let mut result = None;
    for t in 0..=cfg.refine_iters {
        let out = model.forward_with_embedding(&embedding, &prompts)?;
        let pred = MaskPrediction::from_output(&out, size, cfg.binarize_threshold)?;
        let r = PredictionResult::new(pred, t + 1)?;
        let logits = r.selected_logits()?.detach();
        let prompt = if cfg.binarize_prompt {
            logits
                .gt(cfg.binarize_threshold as f64)?
                .to_dtype(logits.dtype())?
        } else {
            logits
        };
        prompts = PromptSet::with_mask(prompt);
        result = Some(r);
    }
    result.ok_or_else(|| Error::Validation("refinement produced no result".into()))
}

/// Prompt used for the second pass of [`predict_prompted`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptKind {
    /// Single None-prompt pass.
    None,
    /// Foreground clicks at the centre of every predicted region.
    Point,
    /// The first pass's selected logits.
    Mask,
}

impl std::str::FromStr for PromptKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "point" => Ok(Self::Point),
            "mask" => Ok(Self::Mask),
            other => Err(Error::Config(format!("unknown prompt kind {other:?}"))),
        }
    }
}

/// None-prompt pass, then one pass prompted with `kind` derived from it.
/// Regions smaller than `min_area` canvas pixels produce no click.
pub fn predict_prompted(
    model: &SamModel,
    image: &Tensor,
    kind: PromptKind,
    min_area: usize,
) -> Result<PredictionResult> {
    match kind {
        PromptKind::None => predict(model, image),
        PromptKind::Mask => predict_refined(model, image, &InferenceConfig::default()),
        PromptKind::Point => {
            let size = model.config().image_size;
            let embedding = model.encode_image(image)?;
            let out = model.forward_with_embedding(&embedding, &PromptSet::none())?;
            let first = PredictionResult::new(MaskPrediction::from_output(&out, size, 0.0)?, 1)?;
            let points: Vec<PointPrompt> = connected_components(&first.selected_mask)
                .into_iter()
                .filter(|r| r.area >= min_area)
                .map(|r| PointPrompt {
                    x: (r.bbox.x1 + r.bbox.x2) / 2.0,
                    y: (r.bbox.y1 + r.bbox.y2) / 2.0,
                    label: PointLabel::Foreground,
                })
                .collect();
            if points.is_empty() {
                return Ok(first);
            }
            let prompts = PromptSet {
                points,
                ..PromptSet::default()
            };
            let out = model.forward_with_embedding(&embedding, &prompts)?;
            PredictionResult::new(MaskPrediction::from_output(&out, size, 0.0)?, 2)
        }
    }
}
