use std::path::Path;

use image::{Rgb, RgbImage};

use super::{Detection, DetectionReport, ImageResult};
use crate::boxes::BBox;
use crate::error::Result;

pub fn pr_curve_csv(curve: &[(f64, f64)]) -> String {
    let mut s = String::from("recall,precision\n");
    for (r, p) in curve {
        s.push_str(&format!("{r:.9},{p:.9}\n"));
    }
    s
}

/// `report.json`, `pr_curve.csv` and `detections.jsonl` under `dir`.
pub fn write_report(dir: &Path, report: &DetectionReport, images: &[ImageResult]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("report.json"),
        serde_json::to_string_pretty(report)?,
    )?;
    std::fs::write(dir.join("pr_curve.csv"), pr_curve_csv(&report.pr_curve))?;
    let mut lines = String::new();
    for im in images {
        lines.push_str(&serde_json::to_string(im)?);
        lines.push('\n');
    }
    std::fs::write(dir.join("detections.jsonl"), lines)?;
    Ok(())
}

const GT_COLOR: Rgb<u8> = Rgb([0, 220, 0]);
const PRED_COLOR: Rgb<u8> = Rgb([230, 20, 20]);

fn outline(img: &mut RgbImage, b: &BBox, color: Rgb<u8>) {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x1 = (b.x1.floor() as i64).clamp(0, w - 1);
    let y1 = (b.y1.floor() as i64).clamp(0, h - 1);
    let x2 = ((b.x2.ceil() as i64) - 1).clamp(0, w - 1);
    let y2 = ((b.y2.ceil() as i64) - 1).clamp(0, h - 1);
    for x in x1..=x2 {
        img.put_pixel(x as u32, y1 as u32, color);
        img.put_pixel(x as u32, y2 as u32, color);
    }
    for y in y1..=y2 {
        img.put_pixel(x1 as u32, y as u32, color);
        img.put_pixel(x2 as u32, y as u32, color);
    }
}

/// Ground truth in green, predictions in red.
pub fn draw_overlay(image: &RgbImage, gts: &[BBox], dets: &[Detection]) -> RgbImage {
    let mut out = image.clone();
    if out.width() == 0 || out.height() == 0 {
        return out;
    }
    for g in gts {
        outline(&mut out, g, GT_COLOR);
    }
    for d in dets {
        outline(&mut out, &d.bbox, PRED_COLOR);
    }
    out
}
