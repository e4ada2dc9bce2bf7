//! Random photometric augmentation (brightness, contrast, saturation, hue).

use image::RgbImage;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Jitter half-ranges. Multiplicative factors are drawn from
/// `[1 - p, 1 + p]`; the hue shift is additive in `[-p, p]` turns.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ColorJitterParams {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl Default for ColorJitterParams {
    fn default() -> Self {
        ColorJitterParams {
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
        }
    }
}

impl ColorJitterParams {
    pub const NONE: ColorJitterParams = ColorJitterParams {
        brightness: 0.0,
        contrast: 0.0,
        saturation: 0.0,
        hue: 0.0,
    };

    pub fn validate(&self) -> Result<(), String> {
        let all = [self.brightness, self.contrast, self.saturation, self.hue];
        if all.iter().any(|p| !(p.is_finite() && *p >= 0.0)) {
            return Err(format!("jitter parameters must be non-negative, got {self:?}"));
        }
        if self.hue > 0.5 {
            return Err(format!("hue jitter must be at most 0.5 turns, got {}", self.hue));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::NONE
    }
}

/// One draw of jitter factors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterFactors {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue_shift: f32,
}

impl JitterFactors {
    /// Always consumes four draws so the stream position does not depend on
    /// which parameters are zero.
    pub fn sample<R: Rng + ?Sized>(params: &ColorJitterParams, rng: &mut R) -> Self {
        let mut factor = |p: f64| rng.random_range((1.0 - p).max(0.0)..=1.0 + p) as f32;
        let brightness = factor(params.brightness);
        let contrast = factor(params.contrast);
        let saturation = factor(params.saturation);
        let hue_shift = rng.random_range(-params.hue..=params.hue) as f32;
        JitterFactors {
            brightness,
            contrast,
            saturation,
            hue_shift,
        }
    }
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
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
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Applies already-drawn factors. A parameter whose half-range is zero is
/// skipped entirely, so all-zero parameters return the input unchanged.
pub fn apply_jitter(img: &RgbImage, params: &ColorJitterParams, f: &JitterFactors) -> RgbImage {
    if params.is_identity() {
        return img.clone();
    }
    let mut px: Vec<[f32; 3]> = img.pixels().map(|p| [p[0] as f32, p[1] as f32, p[2] as f32]).collect();
    let clamp = |v: f32| v.clamp(0.0, 255.0);

    if params.brightness > 0.0 {
        for p in &mut px {
            p.iter_mut().for_each(|c| *c = clamp(*c * f.brightness));
        }
    }
    if params.contrast > 0.0 && !px.is_empty() {
        let mean = px.iter().map(|&p| luma(p) as f64).sum::<f64>() as f32 / px.len() as f32;
        for p in &mut px {
            p.iter_mut().for_each(|c| *c = clamp((*c - mean) * f.contrast + mean));
        }
    }
    if params.saturation > 0.0 {
        for p in &mut px {
            let g = luma(*p);
            p.iter_mut().for_each(|c| *c = clamp((*c - g) * f.saturation + g));
        }
    }
    if params.hue > 0.0 {
        for p in &mut px {
            let [h, s, v] = rgb_to_hsv(p.map(|c| c / 255.0));
            *p = hsv_to_rgb([h + f.hue_shift, s, v]).map(|c| clamp(c * 255.0));
        }
    }

    let raw = px
        .into_iter()
        .flat_map(|p| p.map(|c| (c + 0.5).floor().clamp(0.0, 255.0) as u8))
        .collect();
    RgbImage::from_raw(img.width(), img.height(), raw).expect("same dimensions")
}

/// Draws factors from `rng` and applies them.
pub fn color_jitter<R: Rng + ?Sized>(img: &RgbImage, params: &ColorJitterParams, rng: &mut R) -> RgbImage {
    let f = JitterFactors::sample(params, rng);
    apply_jitter(img, params, &f)
}
