//! Corrective click sampling for promptable fine-tuning.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::mask::BinaryMask;
use crate::model::{PointLabel, PointPrompt};

/// One foreground click from the missed region and one background click from
/// the spurious region; either may be absent when its region is empty.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionPoints {
    pub pos: Option<(usize, usize)>,
    pub neg: Option<(usize, usize)>,
}

impl CorrectionPoints {
    pub fn to_prompts(&self) -> Vec<PointPrompt> {
        let mut out = Vec::with_capacity(2);
        if let Some((x, y)) = self.pos {
            out.push(PointPrompt {
                x: x as f32,
                y: y as f32,
                label: PointLabel::Foreground,
            });
        }
        if let Some((x, y)) = self.neg {
            out.push(PointPrompt {
                x: x as f32,
                y: y as f32,
                label: PointLabel::Background,
            });
        }
        out
    }
}

fn pick<R: Rng>(rng: &mut R, width: usize, region: &[usize]) -> Option<(usize, usize)> {
    if region.is_empty() {
        return None;
    }
    let i = region[rng.random_range(0..region.len())];
    Some((i % width, i / width))
}

/// Uniform pixel from `gt ∧ ¬pred` as `pos` and from `pred ∧ ¬gt` as `neg`.
pub fn sample_correction_points<R: Rng>(
    pred: &BinaryMask,
    gt: &BinaryMask,
    rng: &mut R,
) -> CorrectionPoints {
    assert!(
        pred.same_shape(gt),
        "prediction and ground truth differ in shape"
    );
    let mut false_neg = Vec::new();
    let mut false_pos = Vec::new();
    for (i, (&p, &g)) in pred.data.iter().zip(&gt.data).enumerate() {
        match (p, g) {
            (false, true) => false_neg.push(i),
            (true, false) => false_pos.push(i),
            _ => {}
        }
    }
    CorrectionPoints {
        pos: pick(rng, gt.width, &false_neg),
        neg: pick(rng, gt.width, &false_pos),
    }
}
