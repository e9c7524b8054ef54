//! Mask-to-box conversion and detection metrics (IoU, P/R/F1, AP).

mod components;
mod metrics;
mod report;

pub use components::{connected_components, Region};
pub use metrics::{
    average_precision, f1_score, iou, match_detections, precision_recall_f1, score_order,
    Detection, ImageBoxes, MatchResult,
};
pub use report::{draw_overlay, pr_curve_csv, write_report};

use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::data::{CanvasTransform, Normalization, PreparedSample, Sample, Split};
use crate::error::{Error, Result};
use crate::inference::{predict, predict_prompted, predict_refined, InferenceConfig, PromptKind};
use crate::mask::BinaryMask;
use crate::model::SamModel;

pub const DEFAULT_MIN_AREA: usize = 16;

/// Boxes of the 8-connected components of a canvas mask, mapped back to
/// original pixels. Components below `min_area` canvas pixels are dropped.
pub fn mask_to_detections(
    mask: &BinaryMask,
    score: f32,
    transform: &CanvasTransform,
    image_id: &str,
    min_area: usize,
) -> Vec<Detection> {
    connected_components(mask)
        .into_iter()
        .filter(|r| r.area >= min_area)
        .map(|r| Detection {
            bbox: transform.to_original(&r.bbox),
            score,
            image_id: image_id.to_string(),
        })
        .filter(|d| !d.bbox.is_degenerate())
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_threshold: f64,
    pub min_area: usize,
    /// `None` evaluates plain prediction; `Some` uses iterative refinement.
    pub refine: Option<InferenceConfig>,
    /// Split to evaluate; `None` takes every sample.
    pub split: Option<Split>,
    pub normalization: Normalization,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            min_area: DEFAULT_MIN_AREA,
            refine: None,
            split: Some(Split::Test),
            normalization: Normalization::default(),
        }
    }
}

/// Anything that maps a prepared canvas to a binary canvas mask and a score.
pub trait MaskPredictor {
    fn predict_mask(&self, sample: &PreparedSample) -> Result<(BinaryMask, f32)>;
}

pub struct ModelPredictor<'m> {
    pub model: &'m SamModel,
    pub refine: Option<InferenceConfig>,
}

impl MaskPredictor for ModelPredictor<'_> {
    fn predict_mask(&self, sample: &PreparedSample) -> Result<(BinaryMask, f32)> {
        let r = match &self.refine {
            Some(c) => predict_refined(self.model, &sample.canvas, c)?,
            None => predict(self.model, &sample.canvas)?,
        };
        Ok((r.selected_mask, r.selected_score))
    }
}

/// Second-pass prompting with a chosen prompt type.
pub struct PromptedPredictor<'m> {
    pub model: &'m SamModel,
    pub kind: PromptKind,
    pub min_area: usize,
}

impl MaskPredictor for PromptedPredictor<'_> {
    fn predict_mask(&self, sample: &PreparedSample) -> Result<(BinaryMask, f32)> {
        let r = predict_prompted(self.model, &sample.canvas, self.kind, self.min_area)?;
        Ok((r.selected_mask, r.selected_score))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageResult {
    pub image_id: String,
    pub score: f32,
    pub detections: Vec<Detection>,
    pub gt_boxes: Vec<BBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap: f64,
    pub iou_threshold: f64,
    pub n_images: usize,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// Refinement iterations used, `None` for plain prediction.
    pub refine_iters: Option<usize>,
    #[serde(skip)]
    pub pr_curve: Vec<(f64, f64)>,
}

/// Scores already-computed per-image detections.
pub fn score_images(
    images: &[ImageResult],
    iou_threshold: f64,
    refine_iters: Option<usize>,
) -> DetectionReport {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    let boxes: Vec<ImageBoxes> = images
        .iter()
        .map(|im| {
            let m = match_detections(&im.detections, &im.gt_boxes, iou_threshold);
            tp += m.tp;
            fp += m.fp;
            fn_ += m.fn_;
            ImageBoxes {
                detections: im.detections.clone(),
                gts: im.gt_boxes.clone(),
            }
        })
        .collect();
    let totals = MatchResult {
        tp,
        fp,
        fn_,
        is_tp: Vec::new(),
        iou_threshold,
    };
    let (precision, recall, f1) = precision_recall_f1(&totals);
    let (ap, pr_curve) = average_precision(&boxes, iou_threshold);
    DetectionReport {
        precision,
        recall,
        f1,
        ap,
        iou_threshold,
        n_images: images.len(),
        tp,
        fp,
        fn_,
        refine_iters,
        pr_curve,
    }
}

/// Runs `predictor` over the configured split and scores the detections.
pub fn evaluate_with<P: MaskPredictor>(
    predictor: &P,
    samples: &[Sample],
    canvas: usize,
    cfg: &EvalConfig,
) -> Result<(DetectionReport, Vec<ImageResult>)> {
    let selected: Vec<&Sample> = samples
        .iter()
        .filter(|s| cfg.split.is_none_or(|sp| s.split == sp))
        .collect();
    if selected.is_empty() {
        return Err(Error::Validation(match cfg.split {
            Some(sp) => format!("no samples in the {sp:?} split"),
            None => "no samples to evaluate".into(),
        }));
    }
    let mut images = Vec::with_capacity(selected.len());
    for s in selected {
        let prepared = PreparedSample::new(s, canvas, &cfg.normalization)?;
        let (mask, score) = predictor.predict_mask(&prepared)?;
        let detections = mask_to_detections(
            &mask,
            score,
            &prepared.transform,
            &s.source_id,
            cfg.min_area,
        );
        images.push(ImageResult {
            image_id: s.source_id.clone(),
            score,
            detections,
            gt_boxes: s.gt_boxes.clone(),
        });
    }
    let refine_iters = cfg.refine.as_ref().map(|r| r.refine_iters);
    Ok((
        score_images(&images, cfg.iou_threshold, refine_iters),
        images,
    ))
}

pub fn evaluate(
    model: &SamModel,
    samples: &[Sample],
    cfg: &EvalConfig,
) -> Result<(DetectionReport, Vec<ImageResult>)> {
    let predictor = ModelPredictor {
        model,
        refine: cfg.refine.clone(),
    };
    evaluate_with(&predictor, samples, model.config().image_size, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_rectangle_becomes_one_box() {
        let m = BinaryMask::from_fn(64, 64, |x, y| {
            (30..50).contains(&x) && (10..20).contains(&y)
        });
        let d = mask_to_detections(&m, 0.7, &CanvasTransform::identity(64), "a", 16);
        assert_eq!(d.len(), 1);
        assert_eq!(d[0].bbox, BBox::new(30.0, 10.0, 50.0, 20.0));
        assert_eq!(d[0].score, 0.7);
        assert!(mask_to_detections(
            &BinaryMask::new(8, 8),
            1.0,
            &CanvasTransform::identity(8),
            "a",
            16
        )
        .is_empty());
    }

    #[test]
    fn speckle_is_dropped() {
        let m = BinaryMask::from_fn(32, 32, |x, y| x < 3 && y < 3);
        assert!(mask_to_detections(&m, 1.0, &CanvasTransform::identity(32), "a", 16).is_empty());
        assert_eq!(
            mask_to_detections(&m, 1.0, &CanvasTransform::identity(32), "a", 9).len(),
            1
        );
    }

    #[test]
    fn boxes_map_back_to_original_pixels() {
        let t = CanvasTransform::new(512, 256, 256).unwrap();
        let m = BinaryMask::from_fn(256, 256, |x, y| {
            (10..30).contains(&x) && (20..25).contains(&y)
        });
        let d = mask_to_detections(&m, 1.0, &t, "a", 16);
        assert_eq!(d[0].bbox, BBox::new(20.0, 40.0, 60.0, 50.0));
    }
}
