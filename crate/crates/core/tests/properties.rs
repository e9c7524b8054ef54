mod common;

use candle_core::{Device, Tensor};
use platesam::boxes::BBox;
use platesam::data::{boxes_to_mask, CanvasTransform};
use platesam::evaluation::{
    average_precision, connected_components, iou, match_detections, Detection,
};
use platesam::inference::select_level;
use platesam::lora::{lora_forward, make_lora, merge_weights};
use platesam::mask::BinaryMask;
use platesam::training::{dice_loss, sample_correction_points};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arb_box() -> impl Strategy<Value = BBox> {
    (0.0f32..300.0, 0.0f32..300.0, 1.0f32..120.0, 1.0f32..80.0)
        .prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn arb_mask(w: usize, h: usize) -> impl Strategy<Value = BinaryMask> {
    proptest::collection::vec(any::<bool>(), w * h).prop_map(move |data| BinaryMask {
        width: w,
        height: h,
        data,
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn iou_is_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
        let (ab, ba) = (iou(&a, &b), iou(&b, &a));
        prop_assert_eq!(ab, ba);
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((iou(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matching_conserves_counts(
        gts in proptest::collection::vec(arb_box(), 0..6),
        dets in proptest::collection::vec((arb_box(), 0.0f32..1.0), 0..8),
        thr in 0.1f64..0.9,
    ) {
        let dets: Vec<Detection> = dets
            .into_iter()
            .map(|(bbox, score)| Detection { bbox, score, image_id: "a".into() })
            .collect();
        let m = match_detections(&dets, &gts, thr);
        prop_assert_eq!(m.tp + m.fp, dets.len());
        prop_assert_eq!(m.tp + m.fn_, gts.len());
        prop_assert!(m.tp <= dets.len().min(gts.len()));
    }

    #[test]
    fn ap_matches_threshold_sweep(seed in any::<u64>(), thr in prop_oneof![Just(0.5), 0.3f64..0.8]) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = common::random_instance(&mut rng, 64);
        let (ap, _) = average_precision(&images, thr);
        let oracle = common::ap_oracle(&images, thr);
        prop_assert!((ap - oracle).abs() <= 1e-9, "ap {} oracle {}", ap, oracle);
        prop_assert!((0.0..=1.0).contains(&ap));
    }

    #[test]
    fn correction_points_are_sound(pred in arb_mask(12, 9), gt in arb_mask(12, 9), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pts = sample_correction_points(&pred, &gt, &mut rng);
        let fn_any = pred.data.iter().zip(&gt.data).any(|(&p, &g)| g && !p);
        let fp_any = pred.data.iter().zip(&gt.data).any(|(&p, &g)| p && !g);
        prop_assert_eq!(pts.pos.is_some(), fn_any);
        prop_assert_eq!(pts.neg.is_some(), fp_any);
        if let Some((x, y)) = pts.pos {
            prop_assert!(gt.get(x, y) && !pred.get(x, y));
        }
        if let Some((x, y)) = pts.neg {
            prop_assert!(pred.get(x, y) && !gt.get(x, y));
        }
    }

    #[test]
    fn canvas_keeps_aspect(w in 1usize..4000, h in 1usize..4000, canvas in prop_oneof![Just(256usize), Just(1024)]) {
        let t = CanvasTransform::new(w, h, canvas).unwrap();
        prop_assert_eq!(t.resized_w.max(t.resized_h), canvas);
        prop_assert_eq!(t.resized_w + t.pad_right, canvas);
        prop_assert_eq!(t.resized_h + t.pad_bottom, canvas);
        // one pixel of rounding on the short side
        let short_exact = w.min(h) as f64 * canvas as f64 / w.max(h) as f64;
        let short = t.resized_w.min(t.resized_h) as f64;
        prop_assert!((short - short_exact).abs() <= 1.0);
    }

    #[test]
    fn boxes_round_trip_within_a_pixel(w in 50usize..3000, h in 50usize..3000, fx in 0.0f32..0.8, fy in 0.0f32..0.8) {
        let t = CanvasTransform::new(w, h, 1024).unwrap();
        let b = BBox::new(fx * w as f32, fy * h as f32, (fx + 0.2) * w as f32, (fy + 0.2) * h as f32);
        let back = t.to_original(&t.to_canvas(&b));
        let err = [back.x1 - b.x1, back.y1 - b.y1, back.x2 - b.x2, back.y2 - b.y2]
            .iter()
            .fold(0.0f32, |m, v| m.max(v.abs()));
        prop_assert!(err <= 1.0);
    }

    #[test]
    fn merged_weight_matches_adapter(seed in any::<u64>(), d in 4usize..40, k in 4usize..40, r in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layer = make_lora(d, k, r, 1.0, &mut rng).unwrap();
        let b = Tensor::randn(0f32, 1.0, (d, r), &Device::Cpu).unwrap();
        layer.b.assign(&b).unwrap();
        let w0 = Tensor::randn(0f32, 1.0, (d, k), &Device::Cpu).unwrap();
        let x = Tensor::randn(0f32, 1.0, (5, d), &Device::Cpu).unwrap();
        let adapted = lora_forward(&layer, &w0, &x).unwrap();
        let merged = x.matmul(&merge_weights(&w0, &layer).unwrap()).unwrap();
        let num = (&adapted - &merged).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
        let den = adapted.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap().max(1.0);
        prop_assert!(num / den <= 1e-5);
    }

    #[test]
    fn dice_matches_reference(p in proptest::collection::vec(0.0f64..1.0, 16), g in proptest::collection::vec(any::<bool>(), 16), eps in 0.1f64..2.0) {
        let gv: Vec<f64> = g.iter().map(|&b| b as u8 as f64).collect();
        let pt = Tensor::from_vec(p.clone(), (4, 4), &Device::Cpu).unwrap();
        let gt = Tensor::from_vec(gv.clone(), (4, 4), &Device::Cpu).unwrap();
        let got = dice_loss(&pt, &gt, eps).unwrap().to_scalar::<f64>().unwrap();
        let want = common::dice_oracle(&p, &gv, eps);
        prop_assert!((got - want).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&got));
    }

    #[test]
    fn selection_picks_a_maximum(scores in proptest::collection::vec(-10.0f32..10.0, 1..6)) {
        let i = select_level(&scores).unwrap();
        prop_assert!(scores.iter().all(|&s| s <= scores[i]));
        prop_assert!(scores[..i].iter().all(|&s| s < scores[i]));
    }

    #[test]
    fn components_partition_the_mask(boxes in proptest::collection::vec(arb_box(), 0..5)) {
        let m = boxes_to_mask(&boxes, 400, 420);
        let regions = connected_components(&m);
        prop_assert_eq!(regions.iter().map(|r| r.area).sum::<usize>(), m.area());
        for r in &regions {
            prop_assert!(r.bbox.area() >= r.area as f32);
        }
    }
}
