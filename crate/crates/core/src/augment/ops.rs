//! Pixel-level image operations used by both augmentation pipelines.
//! Inputs and outputs are in `[0, 1]`.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::{quantize, Image};

const LUMA: [f32; 3] = [0.299, 0.587, 0.114];

fn luma_plane(img: &Image) -> Vec<f32> {
    let n = img.height() * img.width();
    if img.channels() != 3 {
        return img.plane(0).to_vec();
    }
    (0..n)
        .map(|i| LUMA[0] * img.plane(0)[i] + LUMA[1] * img.plane(1)[i] + LUMA[2] * img.plane(2)[i])
        .collect()
}

pub fn hflip(img: &Image) -> Image {
    let mut out = img.clone();
    let w = img.width();
    for c in 0..img.channels() {
        for y in 0..img.height() {
            for x in 0..w {
                out.set(c, y, x, img.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

pub fn grayscale(img: &Image) -> Image {
    let l = luma_plane(img);
    let mut out = img.clone();
    for c in 0..img.channels() {
        out.plane_mut(c).copy_from_slice(&l);
    }
    out
}

fn blend(a: &Image, b: &Image, factor: f32) -> Image {
    // factor * a + (1 - factor) * b
    let mut out = a.clone();
    for (o, (&x, &y)) in out.data_mut().iter_mut().zip(a.data().iter().zip(b.data())) {
        *o = (factor * x + (1.0 - factor) * y).clamp(0.0, 1.0);
    }
    out
}

pub fn adjust_brightness(img: &Image, factor: f32) -> Image {
    let black = Image::filled(img.channels(), img.height(), img.width(), 0.0);
    blend(img, &black, factor)
}

pub fn adjust_contrast(img: &Image, factor: f32) -> Image {
    let l = luma_plane(img);
    let mean = l.iter().sum::<f32>() / l.len() as f32;
    let grey = Image::filled(img.channels(), img.height(), img.width(), mean);
    blend(img, &grey, factor)
}

pub fn adjust_saturation(img: &Image, factor: f32) -> Image {
    blend(img, &grayscale(img), factor)
}

fn rem_euclid(x: f32, m: f32) -> f32 {
    x - m * libm::floorf(x / m)
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        rem_euclid((g - b) / d, 6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = rem_euclid(h, 1.0) * 6.0;
    let i = libm::floorf(h6);
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as i32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates hue by `shift` turns (`[-0.5, 0.5]`). Non-RGB images are returned unchanged.
pub fn adjust_hue(img: &Image, shift: f32) -> Image {
    if img.channels() != 3 {
        return img.clone();
    }
    let mut out = img.clone();
    for i in 0..img.height() * img.width() {
        let (h, s, v) = rgb_to_hsv(img.plane(0)[i], img.plane(1)[i], img.plane(2)[i]);
        let (r, g, b) = hsv_to_rgb(h + shift, s, v);
        out.plane_mut(0)[i] = r.clamp(0.0, 1.0);
        out.plane_mut(1)[i] = g.clamp(0.0, 1.0);
        out.plane_mut(2)[i] = b.clamp(0.0, 1.0);
    }
    out
}

/// Inverts every value at or above `threshold`.
pub fn solarize(img: &Image, threshold: f32) -> Image {
    let mut out = img.clone();
    for v in out.data_mut() {
        if *v >= threshold {
            *v = 1.0 - *v;
        }
    }
    out
}

/// Keeps the top `bits` bits of each 8-bit level.
pub fn posterize(img: &Image, bits: u32) -> Image {
    let bits = bits.clamp(1, 8);
    let mask: u8 = !((1u16 << (8 - bits)) - 1) as u8;
    let mut out = img.clone();
    for v in out.data_mut() {
        *v = f32::from(quantize(*v) & mask) / 255.0;
    }
    out
}

/// Per-channel min/max stretch; flat channels are left as they are.
pub fn autocontrast(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels() {
        let p = out.plane_mut(c);
        let lo = p.iter().copied().fold(f32::INFINITY, f32::min);
        let hi = p.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        if hi > lo {
            for v in p.iter_mut() {
                *v = ((*v - lo) / (hi - lo)).clamp(0.0, 1.0);
            }
        }
    }
    out
}

/// Per-channel histogram equalization over 8-bit levels.
pub fn equalize(img: &Image) -> Image {
    let mut out = img.clone();
    for c in 0..img.channels() {
        let p = out.plane_mut(c);
        let mut hist = [0usize; 256];
        for &v in p.iter() {
            hist[quantize(v) as usize] += 1;
        }
        let last = hist.iter().rposition(|&h| h > 0).map(|i| hist[i]).unwrap_or(0);
        let step = (p.len() - last) / 255;
        if step == 0 {
            continue;
        }
        let mut lut = [0u8; 256];
        let mut n = step / 2;
        for (l, h) in lut.iter_mut().zip(hist) {
            *l = (n / step).min(255) as u8;
            n += h;
        }
        for v in p.iter_mut() {
            *v = f32::from(lut[quantize(*v) as usize]) / 255.0;
        }
    }
    out
}

/// Inverse-mapped affine warp about the image center. `m` maps output
/// coordinates `(x, y)` to input coordinates; samples outside are black.
pub fn affine(img: &Image, m: [f32; 6]) -> Image {
    let (h, w) = (img.height(), img.width());
    let cy = (h as f32 - 1.0) / 2.0;
    let cx = (w as f32 - 1.0) / 2.0;
    let mut out = Image::filled(img.channels(), h, w, 0.0);
    for y in 0..h {
        for x in 0..w {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let sx = m[0] * dx + m[1] * dy + m[2] + cx;
            let sy = m[3] * dx + m[4] * dy + m[5] + cy;
            if sx < -0.5 || sy < -0.5 || sx > w as f32 - 0.5 || sy > h as f32 - 0.5 {
                continue;
            }
            for c in 0..img.channels() {
                out.set(c, y, x, img.sample_bilinear(c, sy, sx));
            }
        }
    }
    out
}

pub fn rotate(img: &Image, degrees: f32) -> Image {
    let t = degrees.to_radians();
    let (s, c) = (libm::sinf(t), libm::cosf(t));
    affine(img, [c, -s, 0.0, s, c, 0.0])
}

pub fn shear_x(img: &Image, factor: f32) -> Image {
    affine(img, [1.0, factor, 0.0, 0.0, 1.0, 0.0])
}

pub fn shear_y(img: &Image, factor: f32) -> Image {
    affine(img, [1.0, 0.0, 0.0, factor, 1.0, 0.0])
}

pub fn translate_x(img: &Image, pixels: f32) -> Image {
    affine(img, [1.0, 0.0, pixels, 0.0, 1.0, 0.0])
}

pub fn translate_y(img: &Image, pixels: f32) -> Image {
    affine(img, [1.0, 0.0, 0.0, 0.0, 1.0, pixels])
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (libm::ceilf(3.0 * sigma) as usize).max(1);
    let mut k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let d = i as f32 - radius as f32;
            libm::expf(-d * d / (2.0 * sigma * sigma))
        })
        .collect();
    let s: f32 = k.iter().sum();
    for v in &mut k {
        *v /= s;
    }
    k
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let (h, w) = (img.height() as isize, img.width() as isize);
    let mut tmp = img.clone();
    let mut out = img.clone();
    for c in 0..img.channels() {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = (x + i as isize - r).clamp(0, w - 1);
                    acc += kv * img.get(c, y as usize, xx as usize);
                }
                tmp.set(c, y as usize, x as usize, acc);
            }
        }
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = (y + i as isize - r).clamp(0, h - 1);
                    acc += kv * tmp.get(c, yy as usize, x as usize);
                }
                out.set(c, y as usize, x as usize, acc.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Per-pixel weighted sum of images of equal shape.
pub fn weighted_sum(parts: &[(f32, Image)], shape_of: &Image) -> Image {
    let mut acc = vec![0.0f32; shape_of.data().len()];
    for (wgt, img) in parts {
        for (a, v) in acc.iter_mut().zip(img.data()) {
            *a += wgt * v;
        }
    }
    let mut out = shape_of.clone();
    out.data_mut().copy_from_slice(&acc);
    out
}
