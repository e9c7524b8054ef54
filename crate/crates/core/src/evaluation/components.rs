use crate::boxes::BBox;
use crate::mask::BinaryMask;

/// One 8-connected foreground region with its exclusive pixel extent.
#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub area: usize,
    pub bbox: BBox,
}

/// 8-connected components in row-major discovery order.
pub fn connected_components(mask: &BinaryMask) -> Vec<Region> {
    let (w, h) = (mask.width, mask.height);
    let mut seen = vec![false; w * h];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for start in 0..w * h {
        if !mask.data[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut x0, mut y0, mut x1, mut y1) = (w, h, 0, 0);
        let mut area = 0;
        while let Some(i) = stack.pop() {
            let (x, y) = (i % w, i / w);
            area += 1;
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || ny < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    let j = ny as usize * w + nx as usize;
                    if mask.data[j] && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        regions.push(Region {
            area,
            bbox: BBox::new(x0 as f32, y0 as f32, (x1 + 1) as f32, (y1 + 1) as f32),
        });
    }
    regions
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_pixels_join() {
        let m = BinaryMask::from_fn(4, 4, |x, y| x == y);
        let r = connected_components(&m);
        assert_eq!(r.len(), 1);
        assert_eq!(r[0].area, 4);
        assert_eq!(r[0].bbox, BBox::new(0.0, 0.0, 4.0, 4.0));
    }

    #[test]
    fn separated_blocks() {
        let m = BinaryMask::from_fn(10, 3, |x, _| !(3..=4).contains(&x));
        let r = connected_components(&m);
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].bbox, BBox::new(0.0, 0.0, 3.0, 3.0));
        assert_eq!(r[1].bbox, BBox::new(5.0, 0.0, 10.0, 3.0));
        assert_eq!(r[1].area, 15);
    }

    #[test]
    fn empty_mask_has_no_regions() {
        assert!(connected_components(&BinaryMask::new(5, 5)).is_empty());
    }
}
