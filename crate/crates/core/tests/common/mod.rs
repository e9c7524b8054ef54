//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use candle_core::{Device, Tensor};
use platesam::boxes::BBox;
use platesam::evaluation::{Detection, ImageBoxes};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Dice loss in plain f64: `1 - (2 sum(pg) + eps) / (sum(p) + sum(g) + eps)`.
pub fn dice_oracle(p: &[f64], g: &[f64], eps: f64) -> f64 {
    let inter: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    let sp: f64 = p.iter().sum();
    let sg: f64 = g.iter().sum();
    1.0 - (2.0 * inter + eps) / (sp + sg + eps)
}

fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area = |v: [f64; 4]| (v[2] - v[0]).max(0.0) * (v[3] - v[1]).max(0.0);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn as_f64(b: &BBox) -> [f64; 4] {
    [b.x1 as f64, b.y1 as f64, b.x2 as f64, b.y2 as f64]
}

/// True positives among detections scoring at least `t`, matched from scratch.
fn tp_at(im: &ImageBoxes, t: f32, thr: f64) -> (usize, usize) {
    let mut idx: Vec<usize> = (0..im.detections.len())
        .filter(|&i| im.detections[i].score >= t)
        .collect();
    // descending score, input order among equals
    idx.sort_by(|&a, &b| {
        im.detections[b]
            .score
            .partial_cmp(&im.detections[a].score)
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut used = vec![false; im.gts.len()];
    let mut tp = 0;
    for &i in &idx {
        let d = as_f64(&im.detections[i].bbox);
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in im.gts.iter().enumerate() {
            let v = box_iou(d, as_f64(g));
            if !used[j] && v >= thr && best.is_none_or(|(_, bv)| v > bv) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            used[j] = true;
            tp += 1;
        }
    }
    (tp, idx.len())
}

/// Exhaustive sweep over every distinct score threshold, then all-points
/// interpolation of the resulting precision/recall points.
pub fn ap_oracle(images: &[ImageBoxes], thr: f64) -> f64 {
    let n_gt: usize = images.iter().map(|im| im.gts.len()).sum();
    if n_gt == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f32> = images
        .iter()
        .flat_map(|im| im.detections.iter().map(|d| d.score))
        .collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let points: Vec<(f64, f64)> = thresholds
        .iter()
        .map(|&t| {
            let (tp, n) = images
                .iter()
                .map(|im| tp_at(im, t, thr))
                .fold((0, 0), |acc, x| (acc.0 + x.0, acc.1 + x.1));
            (tp as f64 / n_gt as f64, tp as f64 / n as f64)
        })
        .collect();
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for k in 0..points.len() {
        let p_interp = points[k..].iter().map(|p| p.1).fold(0.0, f64::max);
        ap += (points[k].0 - prev_r) * p_interp;
        prev_r = points[k].0;
    }
    ap
}

/// Random detection instance with near-duplicate boxes and tied scores.
pub fn random_instance(rng: &mut ChaCha8Rng, max_dets: usize) -> Vec<ImageBoxes> {
    let n_images = rng.random_range(1..=4);
    let mut budget = max_dets;
    (0..n_images)
        .map(|i| {
            let gts: Vec<BBox> = (0..rng.random_range(0..=4))
                .map(|_| {
                    let x = rng.random_range(0.0..200.0f32);
                    let y = rng.random_range(0.0..200.0f32);
                    BBox::new(
                        x,
                        y,
                        x + rng.random_range(10.0..60.0),
                        y + rng.random_range(5.0..30.0),
                    )
                })
                .collect();
            let n = rng.random_range(0..=budget.min(16));
            budget -= n;
            let detections = (0..n)
                .map(|_| {
                    let bbox = if !gts.is_empty() && rng.random_bool(0.7) {
                        let g = gts[rng.random_range(0..gts.len())];
                        let j = |r: &mut ChaCha8Rng| r.random_range(-6.0..6.0f32);
                        BBox::new(g.x1 + j(rng), g.y1 + j(rng), g.x2 + j(rng), g.y2 + j(rng))
                    } else {
                        let x = rng.random_range(0.0..200.0f32);
                        let y = rng.random_range(0.0..200.0f32);
                        BBox::new(x, y, x + 30.0, y + 10.0)
                    };
                    Detection {
                        bbox,
                        score: rng.random_range(0..8u32) as f32 / 8.0,
                        image_id: format!("im{i}"),
                    }
                })
                .collect();
            ImageBoxes { detections, gts }
        })
        .collect()
}

pub fn random_canvas(seed: u64, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let v: Vec<f32> = (0..3 * size * size)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    Tensor::from_vec(v, (3, size, size), &Device::Cpu).unwrap()
}
