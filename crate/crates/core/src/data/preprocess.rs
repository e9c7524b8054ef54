//! Long-side resize onto a square canvas, right/bottom zero padding and
//! per-channel normalization, plus the coordinate maps in both directions.

use candle_core::{Device, Tensor};
use image::{imageops::FilterType, RgbImage};
use serde::{Deserialize, Serialize};

use crate::boxes::BBox;
use crate::error::{Error, Result};
use crate::mask::BinaryMask;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f32; 3],
    pub std: [f32; 3],
}

impl Default for Normalization {
    fn default() -> Self {
        Self {
            mean: [123.675, 116.28, 103.53],
            std: [58.395, 57.12, 57.375],
        }
    }
}

/// How an original image was placed on the canvas. Content is anchored at
/// the top-left corner; padding sits on the right and bottom.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CanvasTransform {
    pub orig_w: usize,
    pub orig_h: usize,
    pub scale: f64,
    pub resized_w: usize,
    pub resized_h: usize,
    pub pad_right: usize,
    pub pad_bottom: usize,
    pub canvas: usize,
}

impl CanvasTransform {
    pub fn new(orig_w: usize, orig_h: usize, canvas: usize) -> Result<Self> {
        if orig_w == 0 || orig_h == 0 {
            return Err(Error::Validation(format!(
                "image has zero dimension {orig_w}x{orig_h}"
            )));
        }
        if canvas == 0 {
            return Err(Error::Config("canvas size must be positive".into()));
        }
        let long = orig_w.max(orig_h);
        let scale = canvas as f64 / long as f64;
        let side = |v: usize| -> usize {
            if v == long {
                canvas
            } else {
                ((v as f64 * scale + 0.5).floor() as usize).clamp(1, canvas)
            }
        };
        let (resized_w, resized_h) = (side(orig_w), side(orig_h));
        Ok(Self {
            orig_w,
            orig_h,
            scale,
            resized_w,
            resized_h,
            pad_right: canvas - resized_w,
            pad_bottom: canvas - resized_h,
            canvas,
        })
    }

    pub fn identity(size: usize) -> Self {
        Self {
            orig_w: size,
            orig_h: size,
            scale: 1.0,
            resized_w: size,
            resized_h: size,
            pad_right: 0,
            pad_bottom: 0,
            canvas: size,
        }
    }

    pub fn to_canvas(&self, b: &BBox) -> BBox {
        b.scaled(self.scale as f32)
    }

    pub fn to_original(&self, b: &BBox) -> BBox {
        b.scaled((1.0 / self.scale) as f32)
            .clamped(self.orig_w as f32, self.orig_h as f32)
    }
}

pub fn transform_boxes(boxes: &[BBox], t: &CanvasTransform) -> Vec<BBox> {
    boxes.iter().map(|b| t.to_canvas(b)).collect()
}

pub fn untransform_boxes(boxes: &[BBox], t: &CanvasTransform) -> Vec<BBox> {
    boxes.iter().map(|b| t.to_original(b)).collect()
}

/// Crops the non-padded canvas region and resizes it back to the original size.
pub fn untransform_mask(mask: &BinaryMask, t: &CanvasTransform) -> BinaryMask {
    mask.crop(t.resized_w, t.resized_h)
        .resize_nearest(t.orig_w, t.orig_h)
}

/// Resized, padded and normalized canvas `[3, canvas, canvas]`.
pub fn preprocess(
    image: &RgbImage,
    canvas: usize,
    norm: &Normalization,
) -> Result<(Tensor, CanvasTransform)> {
    let t = CanvasTransform::new(image.width() as usize, image.height() as usize, canvas)?;
    let resized;
    let src = if t.resized_w == t.orig_w && t.resized_h == t.orig_h {
        image
    } else {
        resized = image::imageops::resize(
            image,
            t.resized_w as u32,
            t.resized_h as u32,
            FilterType::Triangle,
        );
        &resized
    };
    let plane = canvas * canvas;
    let mut data = vec![0f32; 3 * plane];
    for (x, y, px) in src.enumerate_pixels() {
        let (x, y) = (x as usize, y as usize);
        for c in 0..3 {
            data[c * plane + y * canvas + x] = (px[c] as f32 - norm.mean[c]) / norm.std[c];
        }
    }
    Ok((
        Tensor::from_vec(data, (3, canvas, canvas), &Device::Cpu)?,
        t,
    ))
}

/// Fills every box with the pixel-centre rule: pixel `(x, y)` is set iff
/// `x1 ≤ x + ½ < x2` and `y1 ≤ y + ½ < y2` for some box. For integer boxes this
/// is exactly `[x1, x2) × [y1, y2)`. Degenerate boxes are skipped.
pub fn boxes_to_mask(boxes: &[BBox], height: usize, width: usize) -> BinaryMask {
    let mut mask = BinaryMask::new(width, height);
    for b in boxes {
        if b.is_degenerate() || !b.is_finite() {
            log::warn!("dropping degenerate box {b:?}");
            continue;
        }
        let lo = |v: f32, n: usize| ((v - 0.5).ceil().max(0.0) as usize).min(n);
        let x0 = lo(b.x1, width);
        let x1 = lo(b.x2, width);
        let y0 = lo(b.y1, height);
        let y1 = lo(b.y2, height);
        for y in y0..y1 {
            for x in x0..x1 {
                mask.set(x, y, true);
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn long_side_resize_arithmetic() {
        let t = CanvasTransform::new(1920, 1080, 1024).unwrap();
        assert_eq!((t.resized_w, t.resized_h), (1024, 576));
        assert_eq!((t.pad_right, t.pad_bottom), (0, 448));

        let t = CanvasTransform::new(720, 1160, 1024).unwrap();
        assert_eq!((t.resized_w, t.resized_h), (636, 1024));
        assert_eq!((t.pad_right, t.pad_bottom), (388, 0));

        let t = CanvasTransform::new(1024, 1024, 1024).unwrap();
        assert_eq!(t, CanvasTransform::identity(1024));
    }

    #[test]
    fn zero_dimension_rejected() {
        assert!(CanvasTransform::new(0, 10, 256).is_err());
        let img = RgbImage::new(0, 0);
        assert!(preprocess(&img, 256, &Normalization::default()).is_err());
    }

    #[test]
    fn box_transform_examples() {
        let t = CanvasTransform::new(1920, 1080, 1024).unwrap();
        let b = t.to_canvas(&BBox::new(0.0, 0.0, 1920.0, 1080.0));
        assert!(b.max_abs_diff(&BBox::new(0.0, 0.0, 1024.0, 576.0)) < 1e-3);
        let id = CanvasTransform::identity(256);
        let b = BBox::new(3.0, 4.0, 50.0, 60.0);
        assert_eq!(id.to_canvas(&b), b);
        assert_eq!(id.to_original(&b), b);
    }

    #[test]
    fn padding_is_zero_and_content_normalized() {
        let mut img = RgbImage::new(32, 16);
        for p in img.pixels_mut() {
            *p = image::Rgb([200, 100, 50]);
        }
        let norm = Normalization::default();
        let (canvas, t) = preprocess(&img, 64, &norm).unwrap();
        assert_eq!((t.resized_w, t.resized_h, t.pad_bottom), (64, 32, 32));
        let v = canvas.to_vec3::<f32>().unwrap();
        for c in 0..3 {
            for y in 32..64 {
                assert!(v[c][y].iter().all(|&p| p == 0.0));
            }
        }
        let expect = (200.0 - norm.mean[0]) / norm.std[0];
        assert!((v[0][10][10] - expect).abs() < 1e-5);
    }

    #[test]
    fn mask_rasterization() {
        assert_eq!(boxes_to_mask(&[], 20, 20).area(), 0);
        assert_eq!(
            boxes_to_mask(&[BBox::new(0.0, 0.0, 10.0, 10.0)], 20, 20).area(),
            100
        );
        // degenerate boxes are dropped
        assert_eq!(
            boxes_to_mask(&[BBox::new(5.0, 5.0, 5.0, 9.0)], 20, 20).area(),
            0
        );
        let m = boxes_to_mask(&[BBox::new(2.0, 3.0, 4.0, 5.0)], 8, 8);
        assert!(m.get(2, 3) && m.get(3, 4) && !m.get(4, 3) && !m.get(2, 5));
    }

    #[test]
    fn overlapping_boxes_fill_the_union() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(5.0, 5.0, 15.0, 12.0);
        let m = boxes_to_mask(&[a, b], 20, 20);
        // brute-force union count
        let mut n = 0;
        for y in 0..20 {
            for x in 0..20 {
                let inside = |bb: &BBox| {
                    (x as f32) >= bb.x1
                        && (x as f32) < bb.x2
                        && (y as f32) >= bb.y1
                        && (y as f32) < bb.y2
                };
                n += (inside(&a) || inside(&b)) as usize;
            }
        }
        assert_eq!(m.area(), n);
        assert!(m.area() <= (a.area() + b.area()) as usize);
    }
}
