//! Geometric/photometric view: random resized crop, flip, color jitter,
//! grayscale, blur and solarize.

use alloc::format;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ops;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, StreamRng};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MocoConfig {
    /// Crop area as a fraction of the input area.
    pub crop_scale: [f64; 2],
    /// Crop aspect ratio (width / height).
    pub crop_ratio: [f64; 2],
    /// Inputs with a side shorter than this are rejected.
    pub min_size: usize,
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    pub solarize_prob: f64,
    pub solarize_threshold: f64,
}

impl Default for MocoConfig {
    fn default() -> Self {
        Self {
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            min_size: 8,
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 0.5,
            blur_sigma: [0.1, 2.0],
            solarize_prob: 0.2,
            solarize_threshold: 0.5,
        }
    }
}

impl MocoConfig {
    /// Full-size crop and every stochastic operation disabled.
    pub fn identity() -> Self {
        Self {
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            flip_prob: 0.0,
            jitter_prob: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            solarize_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("solarize_prob", self.solarize_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("augment.moco.{name} must lie in [0, 1]")));
            }
        }
        let [s0, s1] = self.crop_scale;
        if !(s0 > 0.0 && s0 <= s1 && s1 <= 1.0) {
            return Err(Error::Config("augment.moco.crop_scale must satisfy 0 < lo <= hi <= 1".into()));
        }
        let [r0, r1] = self.crop_ratio;
        if !(r0 > 0.0 && r0 <= r1) {
            return Err(Error::Config("augment.moco.crop_ratio must satisfy 0 < lo <= hi".into()));
        }
        let [b0, b1] = self.blur_sigma;
        if !(b0 > 0.0 && b0 <= b1) {
            return Err(Error::Config("augment.moco.blur_sigma must satisfy 0 < lo <= hi".into()));
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("augment.moco.{name} must lie in [0, 1]")));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::Config("augment.moco.hue must lie in [0, 0.5]".into()));
        }
        Ok(())
    }
}

fn uniform(r: &mut StreamRng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        r.random_range(lo..hi)
    } else {
        lo
    }
}

/// Crop window `(top, left, h, w)` with ten rejection attempts, then a
/// ratio-clamped center fallback.
fn crop_window(h: usize, w: usize, cfg: &MocoConfig, r: &mut StreamRng) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (libm::log(cfg.crop_ratio[0]), libm::log(cfg.crop_ratio[1]));
    for _ in 0..10 {
        let target = area * uniform(r, cfg.crop_scale[0], cfg.crop_scale[1]);
        let ratio = libm::exp(uniform(r, lr0, lr1));
        let cw = libm::round(libm::sqrt(target * ratio)) as usize;
        let ch = libm::round(libm::sqrt(target / ratio)) as usize;
        if cw > 0 && ch > 0 && cw <= w && ch <= h {
            let top = r.random_range(0..=h - ch);
            let left = r.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let in_ratio = w as f64 / h as f64;
    let (ch, cw) = if in_ratio < cfg.crop_ratio[0] {
        ((libm::round(w as f64 / cfg.crop_ratio[0]) as usize).clamp(1, h), w)
    } else if in_ratio > cfg.crop_ratio[1] {
        (h, (libm::round(h as f64 * cfg.crop_ratio[1]) as usize).clamp(1, w))
    } else {
        (h, w)
    };
    ((h - ch) / 2, (w - cw) / 2, ch, cw)
}

fn jitter(img: &Image, cfg: &MocoConfig, r: &mut StreamRng) -> Image {
    let mut order = [0u8, 1, 2, 3];
    order.shuffle(r);
    let mut out = img.clone();
    for op in order {
        out = match op {
            0 if cfg.brightness > 0.0 => {
                let f = uniform(r, 1.0 - cfg.brightness, 1.0 + cfg.brightness);
                ops::adjust_brightness(&out, f as f32)
            }
            1 if cfg.contrast > 0.0 => {
                let f = uniform(r, 1.0 - cfg.contrast, 1.0 + cfg.contrast);
                ops::adjust_contrast(&out, f as f32)
            }
            2 if cfg.saturation > 0.0 => {
                let f = uniform(r, 1.0 - cfg.saturation, 1.0 + cfg.saturation);
                ops::adjust_saturation(&out, f as f32)
            }
            3 if cfg.hue > 0.0 => {
                let s = uniform(r, -cfg.hue, cfg.hue);
                ops::adjust_hue(&out, s as f32)
            }
            _ => out,
        };
    }
    out
}

/// Output has the input's spatial size.
pub fn moco_view(x: &Image, seed: u64, cfg: &MocoConfig) -> Result<Image> {
    cfg.validate()?;
    let (h, w) = (x.height(), x.width());
    if h.min(w) < cfg.min_size {
        return Err(Error::Validation(format!(
            "image {h}x{w} is smaller than the {0}x{0} crop minimum",
            cfg.min_size
        )));
    }
    let mut r = rng::rng(seed);
    let (top, left, ch, cw) = crop_window(h, w, cfg, &mut r);
    let mut out = x.crop(top, left, ch, cw)?.resize(h, w);
    if r.random_bool(cfg.flip_prob) {
        out = ops::hflip(&out);
    }
    if r.random_bool(cfg.jitter_prob) {
        out = jitter(&out, cfg, &mut r);
    }
    if r.random_bool(cfg.grayscale_prob) {
        out = ops::grayscale(&out);
    }
    if r.random_bool(cfg.blur_prob) {
        let s = uniform(&mut r, cfg.blur_sigma[0], cfg.blur_sigma[1]);
        out = ops::gaussian_blur(&out, s as f32);
    }
    if r.random_bool(cfg.solarize_prob) {
        out = ops::solarize(&out, cfg.solarize_threshold as f32);
    }
    Ok(out)
}
