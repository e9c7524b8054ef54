//! Samples, preprocessing, dataset adapters and the synthetic plate-scene generator.

mod loaders;
mod preprocess;
mod synth;

use candle_core::Tensor;
use image::RgbImage;
use serde::{Deserialize, Serialize};

pub use loaders::{
    load_ccpd, load_dataset, load_ufpr, load_ufpr_with, parse_ccpd_name, parse_ufpr_annotation,
    write_generic_json, DatasetFormat, GenericAnnotations, GenericEntry, LoadReport,
    GENERIC_JSON_FILE,
};
pub use preprocess::{
    boxes_to_mask, preprocess, transform_boxes, untransform_boxes, untransform_mask,
    CanvasTransform, Normalization,
};
pub use synth::{synthesize_dataset, SceneKind, SynthConfig};

use crate::boxes::BBox;
use crate::error::Result;
use crate::mask::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(crate::Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

/// One annotated image in original resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub image: RgbImage,
    pub gt_boxes: Vec<BBox>,
    /// Union of the filled boxes, `width × height`.
    pub gt_mask: BinaryMask,
    pub source_id: String,
    pub split: Split,
}

impl Sample {
    /// Clamps boxes into the image and drops the ones that end up empty.
    pub fn new(image: RgbImage, boxes: Vec<BBox>, source_id: String, split: Split) -> Result<Self> {
        let (w, h) = (image.width() as usize, image.height() as usize);
        if w == 0 || h == 0 {
            return Err(crate::Error::Validation(format!(
                "{source_id}: empty image"
            )));
        }
        let gt_boxes: Vec<BBox> = boxes
            .into_iter()
            .filter(|b| b.is_finite())
            .map(|b| b.clamped(w as f32, h as f32))
            .filter(|b| {
                let keep = !b.is_degenerate();
                if !keep {
                    log::warn!("{source_id}: dropping degenerate box {b:?}");
                }
                keep
            })
            .collect();
        let gt_mask = boxes_to_mask(&gt_boxes, h, w);
        Ok(Self {
            image,
            gt_boxes,
            gt_mask,
            source_id,
            split,
        })
    }

    pub fn width(&self) -> usize {
        self.image.width() as usize
    }

    pub fn height(&self) -> usize {
        self.image.height() as usize
    }
}

/// A sample moved onto the model canvas, ready for training or evaluation.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub canvas: Tensor,
    pub transform: CanvasTransform,
    /// Ground truth rasterized on the canvas from the transformed boxes.
    pub gt_canvas: BinaryMask,
    pub canvas_boxes: Vec<BBox>,
}

impl PreparedSample {
    pub fn new(sample: &Sample, canvas: usize, norm: &Normalization) -> Result<Self> {
        let (tensor, transform) = preprocess(&sample.image, canvas, norm)?;
        let canvas_boxes = transform_boxes(&sample.gt_boxes, &transform);
        let gt_canvas = boxes_to_mask(&canvas_boxes, canvas, canvas);
        Ok(Self {
            canvas: tensor,
            transform,
            gt_canvas,
            canvas_boxes,
        })
    }
}

pub fn filter_split(samples: &[Sample], split: Split) -> Vec<Sample> {
    samples
        .iter()
        .filter(|s| s.split == split)
        .cloned()
        .collect()
}
