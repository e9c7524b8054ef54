//! Synthetic road scenes with plate-like rectangles, for desk-scale runs.

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Sample, Split};
use crate::boxes::BBox;
use crate::error::{Error, Result};

/// What the labelled objects in a scene are.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SceneKind {
    /// Plates labelled; car-body clutter left unlabelled.
    #[default]
    Plates,
    /// Solid, striped and panel-like rectangles, every one labelled.
    Objects,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub kind: SceneKind,
    pub width: u32,
    pub height: u32,
    /// Exact plate count per image; `None` draws 1..=max_plates.
    pub plates: Option<usize>,
    pub max_plates: usize,
    pub min_plate_width: u32,
    pub max_plate_width: u32,
    /// Width / height range of a plate.
    pub min_aspect: f32,
    pub max_aspect: f32,
    /// Minimum background gap between plates, in pixels.
    pub gap: u32,
    /// Trailing fraction of samples tagged as the test split.
    pub test_fraction: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            kind: SceneKind::Plates,
            width: 320,
            height: 240,
            plates: None,
            max_plates: 3,
            min_plate_width: 80,
            max_plate_width: 130,
            min_aspect: 2.5,
            max_aspect: 3.5,
            gap: 10,
            test_fraction: 0.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic data: {m}")));
        if self.max_plates == 0 || self.plates == Some(0) {
            return bad("at least one plate per image");
        }
        if self.min_plate_width < 8 || self.min_plate_width > self.max_plate_width {
            return bad("plate width range");
        }
        if self.max_plate_width + 2 * self.gap > self.width {
            return bad("plates do not fit the image width");
        }
        if !(self.min_aspect >= 1.0 && self.min_aspect <= self.max_aspect) {
            return bad("aspect range");
        }
        if !(0.0..=1.0).contains(&self.test_fraction) {
            return bad("test_fraction outside [0, 1]");
        }
        Ok(())
    }
}

/// `n` samples; sample `i` depends only on `(seed, i)`.
pub fn synthesize_dataset(n: usize, seed: u64, cfg: &SynthConfig) -> Result<Vec<Sample>> {
    if n == 0 {
        return Err(Error::Validation("synthesize_dataset needs n >= 1".into()));
    }
    cfg.validate()?;
    let n_test = (n as f64 * cfg.test_fraction).round() as usize;
    (0..n)
        .map(|i| {
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ i as u64);
            let (image, boxes) = render_scene(&mut rng, cfg);
            let split = if i >= n - n_test {
                Split::Test
            } else {
                Split::Train
            };
            Sample::new(image, boxes, format!("synth_{seed}_{i:05}"), split)
        })
        .collect()
}

fn clamp_u8(v: f32) -> u8 {
    v.round().clamp(0.0, 255.0) as u8
}

fn fill_rect(img: &mut RgbImage, x0: u32, y0: u32, x1: u32, y1: u32, color: [u8; 3]) {
    for y in y0..y1.min(img.height()) {
        for x in x0..x1.min(img.width()) {
            img.put_pixel(x, y, Rgb(color));
        }
    }
}

fn render_scene(rng: &mut ChaCha8Rng, cfg: &SynthConfig) -> (RgbImage, Vec<BBox>) {
    let (w, h) = (cfg.width, cfg.height);
    let mut img = RgbImage::new(w, h);

    // asphalt: vertical gradient, slight colour cast, per-pixel noise
    let base: f32 = rng.random_range(70.0..140.0);
    let slope: f32 = rng.random_range(-40.0..40.0);
    let tint: [f32; 3] = [
        rng.random_range(-8.0..8.0),
        rng.random_range(-8.0..8.0),
        rng.random_range(-8.0..8.0),
    ];
    for y in 0..h {
        let row = base + slope * (y as f32 / h as f32 - 0.5);
        for x in 0..w {
            let noise: f32 = rng.random_range(-18.0..18.0);
            let v = row + noise;
            img.put_pixel(
                x,
                y,
                Rgb([
                    clamp_u8(v + tint[0]),
                    clamp_u8(v + tint[1]),
                    clamp_u8(v + tint[2]),
                ]),
            );
        }
    }
    if cfg.kind == SceneKind::Objects {
        let boxes = render_objects(&mut img, rng, cfg, base);
        return (img, boxes);
    }
    // low-contrast clutter: car bodies, lane marks
    for _ in 0..rng.random_range(2..6) {
        let bw = rng.random_range(20..w / 2);
        let bh = rng.random_range(10..h / 3);
        let bx = rng.random_range(0..w - bw);
        let by = rng.random_range(0..h - bh);
        let shade = clamp_u8(base + rng.random_range(-45.0..25.0));
        fill_rect(
            &mut img,
            bx,
            by,
            bx + bw,
            by + bh,
            [shade, shade, shade.saturating_add(6)],
        );
    }

    let count = cfg
        .plates
        .unwrap_or_else(|| rng.random_range(1..=cfg.max_plates));
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count && attempts < 500 {
        attempts += 1;
        let pw = rng.random_range(cfg.min_plate_width..=cfg.max_plate_width);
        let aspect: f32 = rng.random_range(cfg.min_aspect..=cfg.max_aspect);
        let ph = ((pw as f32 / aspect).round() as u32).max(6);
        if ph + 2 * cfg.gap > h {
            continue;
        }
        let x0 = rng.random_range(cfg.gap..=w - pw - cfg.gap);
        let y0 = rng.random_range(cfg.gap..=h - ph - cfg.gap);
        let cand = BBox::new(x0 as f32, y0 as f32, (x0 + pw) as f32, (y0 + ph) as f32);
        let g = cfg.gap as f32;
        let grown = BBox::new(cand.x1 - g, cand.y1 - g, cand.x2 + g, cand.y2 + g);
        if boxes.iter().any(|b| b.intersection_area(&grown) > 0.0) {
            continue;
        }
        draw_plate(&mut img, rng, x0, y0, pw, ph);
        boxes.push(cand);
    }
    (img, boxes)
}

/// A random colour whose mean differs from `background` by at least 60 levels.
fn contrasting_color(rng: &mut ChaCha8Rng, background: f32) -> [u8; 3] {
    loop {
        let c: [u8; 3] = [rng.random(), rng.random(), rng.random()];
        let mean = c.iter().map(|&v| v as f32).sum::<f32>() / 3.0;
        if (mean - background).abs() >= 60.0 {
            return c;
        }
    }
}

fn render_objects(
    img: &mut RgbImage,
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    background: f32,
) -> Vec<BBox> {
    let (w, h) = (cfg.width, cfg.height);
    let count = rng.random_range(2..=5);
    let mut boxes: Vec<BBox> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count && attempts < 500 {
        attempts += 1;
        let ow = rng.random_range(16..=w / 2);
        let oh = rng.random_range(12..=h / 2);
        if ow + 2 * cfg.gap > w || oh + 2 * cfg.gap > h {
            continue;
        }
        let x0 = rng.random_range(cfg.gap..=w - ow - cfg.gap);
        let y0 = rng.random_range(cfg.gap..=h - oh - cfg.gap);
        let cand = BBox::new(x0 as f32, y0 as f32, (x0 + ow) as f32, (y0 + oh) as f32);
        let g = cfg.gap as f32;
        let grown = BBox::new(cand.x1 - g, cand.y1 - g, cand.x2 + g, cand.y2 + g);
        if boxes.iter().any(|b| b.intersection_area(&grown) > 0.0) {
            continue;
        }
        match rng.random_range(0..3) {
            0 => draw_plate(img, rng, x0, y0, ow, oh),
            style => {
                let color = contrasting_color(rng, background);
                fill_rect(img, x0, y0, x0 + ow, y0 + oh, color);
                if style == 2 {
                    let other = contrasting_color(rng, background);
                    let period = rng.random_range(4..=12u32);
                    for sx in (x0..x0 + ow).step_by(period as usize) {
                        fill_rect(img, sx, y0, (sx + period / 2).min(x0 + ow), y0 + oh, other);
                    }
                }
            }
        }
        boxes.push(cand);
    }
    boxes
}

fn draw_plate(img: &mut RgbImage, rng: &mut ChaCha8Rng, x0: u32, y0: u32, pw: u32, ph: u32) {
    let face = if rng.random_bool(0.7) {
        [
            rng.random_range(225..=255),
            rng.random_range(225..=255),
            rng.random_range(225..=255),
        ]
    } else {
        [
            rng.random_range(230..=255),
            rng.random_range(190..=215),
            rng.random_range(20..=60),
        ]
    };
    let ink = rng.random_range(10..=40u8);
    let border = 2.min(ph / 4).max(1);
    fill_rect(img, x0, y0, x0 + pw, y0 + ph, [ink, ink, ink]);
    fill_rect(
        img,
        x0 + border,
        y0 + border,
        x0 + pw - border,
        y0 + ph - border,
        face,
    );

    // glyph-like strokes
    let glyphs = rng.random_range(5..=7u32);
    let margin = border + 2;
    let inner = pw.saturating_sub(2 * margin);
    let slot = (inner / glyphs).max(2);
    let gh = (ph * 3 / 5).max(2);
    let gy = y0 + (ph - gh) / 2;
    for i in 0..glyphs {
        let gx = x0 + margin + i * slot + slot / 5;
        let gw = (slot * 3 / 5).max(1);
        let style = rng.random_range(0..3);
        match style {
            0 => fill_rect(img, gx, gy, gx + gw, gy + gh, [ink, ink, ink]),
            1 => {
                fill_rect(img, gx, gy, gx + gw.max(2) / 2, gy + gh, [ink, ink, ink]);
                fill_rect(img, gx, gy, gx + gw, gy + 2, [ink, ink, ink]);
                fill_rect(img, gx, gy + gh - 2, gx + gw, gy + gh, [ink, ink, ink]);
            }
            _ => {
                fill_rect(img, gx, gy, gx + gw, gy + 2, [ink, ink, ink]);
                fill_rect(
                    img,
                    gx + gw.saturating_sub(2),
                    gy,
                    gx + gw,
                    gy + gh,
                    [ink, ink, ink],
                );
                fill_rect(
                    img,
                    gx,
                    gy + gh / 2,
                    gx + gw,
                    gy + gh / 2 + 2,
                    [ink, ink, ink],
                );
            }
        }
    }
}
