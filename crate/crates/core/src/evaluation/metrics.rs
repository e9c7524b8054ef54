use serde::{Deserialize, Serialize};

use crate::boxes::BBox;

/// A predicted plate in original image pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f32,
    pub image_id: String,
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b) as f64;
    let union = a.area() as f64 + b.area() as f64 - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    /// True-positive flag per detection, in input order.
    pub is_tp: Vec<bool>,
    pub iou_threshold: f64,
}

/// Detection indices by descending score; equal scores keep input order.
pub fn score_order(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy one-to-one matching within one image: in descending score order,
/// each detection takes the unmatched ground truth of highest IoU, provided
/// that IoU reaches the threshold.
pub fn match_detections(dets: &[Detection], gts: &[BBox], iou_threshold: f64) -> MatchResult {
    let mut taken = vec![false; gts.len()];
    let mut is_tp = vec![false; dets.len()];
    for i in score_order(dets) {
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if taken[j] {
                continue;
            }
            let v = iou(&dets[i].bbox, g);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
            is_tp[i] = true;
        }
    }
    let tp = is_tp.iter().filter(|&&t| t).count();
    MatchResult {
        tp,
        fp: dets.len() - tp,
        fn_: gts.len() - tp,
        is_tp,
        iou_threshold,
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

pub fn f1_score(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// `(P, R, F1)` with `0/0 = 0`.
pub fn precision_recall_f1(m: &MatchResult) -> (f64, f64, f64) {
    let p = ratio(m.tp, m.tp + m.fp);
    let r = ratio(m.tp, m.tp + m.fn_);
    (p, r, f1_score(p, r))
}

/// Detections and ground truths of one image.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ImageBoxes {
    pub detections: Vec<Detection>,
    pub gts: Vec<BBox>,
}

/// All-points interpolated average precision over a dataset, and the raw
/// `(recall, precision)` points, one per distinct score threshold.
pub fn average_precision(images: &[ImageBoxes], iou_threshold: f64) -> (f64, Vec<(f64, f64)>) {
    let n_gt: usize = images.iter().map(|im| im.gts.len()).sum();
    // matching per image is independent of lower-scored detections, so one
    // pass yields the TP flag each detection has at every threshold
    let mut scored: Vec<(f32, bool)> = Vec::new();
    for im in images {
        let m = match_detections(&im.detections, &im.gts, iou_threshold);
        scored.extend(
            im.detections
                .iter()
                .zip(&m.is_tp)
                .map(|(d, &t)| (d.score, t)),
        );
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));

    let mut curve = Vec::new();
    let (mut tp, mut seen) = (0usize, 0usize);
    for (k, &(score, hit)) in scored.iter().enumerate() {
        tp += hit as usize;
        seen += 1;
        let group_ends = scored.get(k + 1).is_none_or(|next| next.0 != score);
        if group_ends {
            curve.push((ratio(tp, n_gt), ratio(tp, seen)));
        }
    }
    if n_gt == 0 {
        return (0.0, curve);
    }
    let mut envelope: Vec<f64> = curve.iter().map(|&(_, p)| p).collect();
    for i in (0..envelope.len().saturating_sub(1)).rev() {
        envelope[i] = envelope[i].max(envelope[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (&(r, _), &p) in curve.iter().zip(&envelope) {
        ap += (r - prev_r) * p;
        prev_r = r;
    }
    (ap, curve)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(x1: f32, y1: f32, x2: f32, y2: f32, score: f32) -> Detection {
        Detection {
            bbox: BBox::new(x1, y1, x2, y2),
            score,
            image_id: "img".into(),
        }
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert!((iou(&a, &BBox::new(5.0, 0.0, 15.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &BBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
    }

    #[test]
    fn matching_examples() {
        let gts = vec![
            BBox::new(0.0, 0.0, 10.0, 10.0),
            BBox::new(20.0, 0.0, 30.0, 10.0),
        ];
        let perfect = vec![
            det(0.0, 0.0, 10.0, 10.0, 0.9),
            det(20.0, 0.0, 30.0, 10.0, 0.8),
        ];
        let m = match_detections(&perfect, &gts, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (2, 0, 0));

        let dup = vec![
            det(0.0, 0.0, 10.0, 10.0, 0.9),
            det(0.0, 0.0, 10.0, 9.0, 0.8),
        ];
        let m = match_detections(&dup, &gts[..1], 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        assert_eq!(m.is_tp, vec![true, false]);

        let m = match_detections(&[], &gts, 0.5);
        assert_eq!((m.tp, m.fp, m.fn_), (0, 0, 2));
    }

    #[test]
    fn prf_examples() {
        let m = |tp, fp, fn_| MatchResult {
            tp,
            fp,
            fn_,
            is_tp: vec![],
            iou_threshold: 0.5,
        };
        assert_eq!(precision_recall_f1(&m(0, 0, 0)), (0.0, 0.0, 0.0));
        assert_eq!(precision_recall_f1(&m(1, 0, 0)), (1.0, 1.0, 1.0));
        assert!((f1_score(0.953, 0.984) - 0.968).abs() < 1e-3);
    }

    #[test]
    fn ap_examples() {
        let gt = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        let im = ImageBoxes {
            detections: vec![
                det(50.0, 50.0, 60.0, 60.0, 0.9),
                det(0.0, 0.0, 10.0, 10.0, 0.5),
            ],
            gts: gt.clone(),
        };
        let (ap, curve) = average_precision(&[im], 0.5);
        assert_eq!(curve, vec![(0.0, 0.0), (1.0, 0.5)]);
        assert!((ap - 0.5).abs() < 1e-12);

        let im = ImageBoxes {
            detections: vec![det(0.0, 0.0, 10.0, 10.0, 0.1)],
            gts: gt,
        };
        assert_eq!(average_precision(&[im], 0.5).0, 1.0);
        assert_eq!(average_precision(&[ImageBoxes::default()], 0.5).0, 0.0);
    }

    #[test]
    fn tied_scores_form_one_point() {
        let gts = vec![BBox::new(0.0, 0.0, 10.0, 10.0)];
        let im = ImageBoxes {
            detections: vec![
                det(50.0, 50.0, 60.0, 60.0, 0.7),
                det(0.0, 0.0, 10.0, 10.0, 0.7),
            ],
            gts,
        };
        let (ap, curve) = average_precision(&[im], 0.5);
        assert_eq!(curve, vec![(1.0, 0.5)]);
        assert!((ap - 0.5).abs() < 1e-12);
    }
}
