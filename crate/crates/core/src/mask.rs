//! Dense binary masks and the resampling helpers that move them between
//! logit, canvas and original-image resolution.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinaryMask {
    pub width: usize,
    pub height: usize,
    /// Row-major.
    pub data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    /// `value > threshold` for a row-major `width × height` map.
    pub fn threshold(values: &[f32], width: usize, height: usize, threshold: f32) -> Self {
        assert_eq!(values.len(), width * height);
        Self {
            width,
            height,
            data: values.iter().map(|&v| v > threshold).collect(),
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: bool) {
        self.data[y * self.width + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&v| v)
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn intersection_area(&self, other: &Self) -> usize {
        assert!(self.same_shape(other));
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    /// Hard Dice coefficient; two empty masks score 1.
    pub fn dice(&self, other: &Self) -> f64 {
        let denom = self.area() + other.area();
        if denom == 0 {
            return 1.0;
        }
        2.0 * self.intersection_area(other) as f64 / denom as f64
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union == 0 {
            return 1.0;
        }
        inter as f64 / union as f64
    }

    pub fn to_f32(&self) -> Vec<f32> {
        self.data
            .iter()
            .map(|&v| if v { 1.0 } else { 0.0 })
            .collect()
    }

    /// Area-average onto a `size × size` grid, then keep cells above one half.
    /// Requires both sides to be multiples of `size`.
    pub fn downsample_majority(&self, width: usize, height: usize) -> Self {
        let fx = self.width / width;
        let fy = self.height / height;
        assert!(fx * width == self.width && fy * height == self.height);
        let cell = (fx * fy) as f64;
        Self::from_fn(width, height, |x, y| {
            let mut n = 0usize;
            for yy in y * fy..(y + 1) * fy {
                for xx in x * fx..(x + 1) * fx {
                    n += self.get(xx, yy) as usize;
                }
            }
            n as f64 / cell > 0.5
        })
    }

    /// Nearest-neighbour resize (pixel-centre sampling).
    pub fn resize_nearest(&self, width: usize, height: usize) -> Self {
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        Self::from_fn(width, height, |x, y| {
            let src_x = (((x as f64 + 0.5) * sx) as usize).min(self.width - 1);
            let src_y = (((y as f64 + 0.5) * sy) as usize).min(self.height - 1);
            self.get(src_x, src_y)
        })
    }

    /// Top-left `width × height` window.
    pub fn crop(&self, width: usize, height: usize) -> Self {
        Self::from_fn(width, height, |x, y| self.get(x, y))
    }
}

/// Bilinear resize of a row-major map with half-pixel centres (no corner alignment).
pub fn upsample_bilinear(
    src: &[f32],
    src_w: usize,
    src_h: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f32> {
    assert_eq!(src.len(), src_w * src_h);
    let sx = src_w as f32 / dst_w as f32;
    let sy = src_h as f32 / dst_h as f32;
    let axis = |dst: usize, scale: f32, len: usize| -> (usize, usize, f32) {
        let pos = ((dst as f32 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (pos.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, pos - i0 as f32)
    };
    let cols: Vec<_> = (0..dst_w).map(|x| axis(x, sx, src_w)).collect();
    let mut out = Vec::with_capacity(dst_w * dst_h);
    for y in 0..dst_h {
        let (y0, y1, wy) = axis(y, sy, src_h);
        for &(x0, x1, wx) in &cols {
            let top = src[y0 * src_w + x0] * (1.0 - wx) + src[y0 * src_w + x1] * wx;
            let bot = src[y1 * src_w + x0] * (1.0 - wx) + src[y1 * src_w + x1] * wx;
            out.push(top * (1.0 - wy) + bot * wy);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dice_and_iou_basics() {
        let a = BinaryMask::from_fn(4, 1, |x, _| x < 2);
        let b = BinaryMask::from_fn(4, 1, |x, _| (1..3).contains(&x));
        assert_eq!(a.intersection_area(&b), 1);
        assert!((a.dice(&b) - 0.5).abs() < 1e-12);
        assert!((a.iou(&b) - 1.0 / 3.0).abs() < 1e-12);
        let e = BinaryMask::new(4, 1);
        assert_eq!(e.dice(&e), 1.0);
    }

    #[test]
    fn majority_downsample() {
        let m = BinaryMask::from_fn(4, 4, |x, y| x < 2 && y < 2);
        let d = m.downsample_majority(2, 2);
        assert_eq!(d.data, vec![true, false, false, false]);
        // exactly half is not a majority
        let half = BinaryMask::from_fn(2, 2, |x, _| x == 0);
        assert_eq!(half.downsample_majority(1, 1).data, vec![false]);
    }

    #[test]
    fn bilinear_constant_and_identity() {
        let src = vec![2.5f32; 9];
        assert!(upsample_bilinear(&src, 3, 3, 7, 5)
            .iter()
            .all(|&v| (v - 2.5).abs() < 1e-6));
        let src: Vec<f32> = (0..12).map(|v| v as f32).collect();
        assert_eq!(upsample_bilinear(&src, 4, 3, 4, 3), src);
    }

    #[test]
    fn bilinear_interpolates_between_centres() {
        // two pixels 0 and 1, upsampled 2x: centres at 0.25 and 0.75 of the way
        let out = upsample_bilinear(&[0.0, 1.0], 2, 1, 4, 1);
        assert_eq!(out, vec![0.0, 0.25, 0.75, 1.0]);
    }
}
