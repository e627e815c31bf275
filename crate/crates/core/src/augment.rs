//! Photometric augmentation for RGB inputs.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::tokenizer::RgbImage;

/// Random brightness, contrast, saturation and hue perturbation, applied in
/// that order. Each factor is drawn uniformly from `[1 − s, 1 + s]`; the hue
/// shift from `[−hue, hue]` in turns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitter {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for ColorJitter {
    fn default() -> Self {
        Self {
            brightness: 0.1,
            contrast: 0.1,
            saturation: 0.1,
            hue: 0.05,
        }
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn factor<R: Rng>(rng: &mut R, s: f64) -> f64 {
    if s > 0.0 {
        rng.random_range(1.0 - s..=1.0 + s)
    } else {
        1.0
    }
}

impl ColorJitter {
    pub fn apply<R: Rng>(&self, img: &RgbImage, rng: &mut R) -> RgbImage {
        let b = factor(rng, self.brightness);
        let c = factor(rng, self.contrast);
        let s = factor(rng, self.saturation);
        let h = if self.hue > 0.0 {
            rng.random_range(-self.hue..=self.hue)
        } else {
            0.0
        };
        let (height, width) = (img.height(), img.width());
        let n = height * width;
        let d = img.data();
        let mut px: Vec<[f64; 3]> = (0..n)
            .map(|i| std::array::from_fn(|ch| (d[ch * n + i] as f64 * b).clamp(0.0, 1.0)))
            .collect();
        let mean = px.iter().map(|p| luma(p[0], p[1], p[2])).sum::<f64>() / n as f64;
        for p in &mut px {
            for v in p.iter_mut() {
                *v = ((*v - mean) * c + mean).clamp(0.0, 1.0);
            }
            let gray = luma(p[0], p[1], p[2]);
            for v in p.iter_mut() {
                *v = ((*v - gray) * s + gray).clamp(0.0, 1.0);
            }
            if h != 0.0 {
                let (hh, ss, vv) = rgb_to_hsv(p[0], p[1], p[2]);
                let (r, g, bl) = hsv_to_rgb(hh + h, ss, vv);
                *p = [r, g, bl];
            }
        }
        let mut out = RgbImage::zeros(height, width);
        for (i, p) in px.iter().enumerate() {
            for (ch, v) in p.iter().enumerate() {
                out.set(ch, i / width, i % width, *v as f32);
            }
        }
        out
    }
}
