//! Planar float images.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

/// A channel-major (`C x H x W`) image with pixel values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(shape_err("Image::new", channels * height * width, data.len()));
        }
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Validation("image has a zero dimension".into()));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Bilinear sample with edge clamping; `(y, x)` in pixel-center coordinates.
    pub fn sample_bilinear(&self, c: usize, y: f32, x: f32) -> f32 {
        let ymax = (self.height - 1) as f32;
        let xmax = (self.width - 1) as f32;
        let y = y.clamp(0.0, ymax);
        let x = x.clamp(0.0, xmax);
        let y0 = libm::floorf(y) as usize;
        let x0 = libm::floorf(x) as usize;
        let y1 = (y0 + 1).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let fy = y - y0 as f32;
        let fx = x - x0 as f32;
        let top = self.get(c, y0, x0) * (1.0 - fx) + self.get(c, y0, x1) * fx;
        let bot = self.get(c, y1, x0) * (1.0 - fx) + self.get(c, y1, x1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Resamples to `h x w` with bilinear interpolation (align-corners off).
    pub fn resize(&self, h: usize, w: usize) -> Image {
        if h == self.height && w == self.width {
            return self.clone();
        }
        let sy = self.height as f32 / h as f32;
        let sx = self.width as f32 / w as f32;
        let mut out = Image::filled(self.channels, h, w, 0.0);
        for c in 0..self.channels {
            for y in 0..h {
                let src_y = (y as f32 + 0.5) * sy - 0.5;
                for x in 0..w {
                    let src_x = (x as f32 + 0.5) * sx - 0.5;
                    out.set(c, y, x, self.sample_bilinear(c, src_y, src_x));
                }
            }
        }
        out
    }

    /// Copies the window at `(top, left)` of size `h x w`.
    pub fn crop(&self, top: usize, left: usize, h: usize, w: usize) -> Result<Image> {
        if top + h > self.height || left + w > self.width || h == 0 || w == 0 {
            return Err(Error::Validation(alloc::format!(
                "crop {h}x{w}+{top}+{left} outside {}x{}",
                self.height,
                self.width
            )));
        }
        let mut out = Image::filled(self.channels, h, w, 0.0);
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.get(c, top + y, left + x));
                }
            }
        }
        Ok(out)
    }

    /// Shorter side resized to `size`, then a centered `size x size` crop.
    pub fn resize_center_crop(&self, size: usize) -> Image {
        let (h, w) = (self.height, self.width);
        let (nh, nw) = if h <= w {
            (size, ((w as f64 * size as f64 / h as f64) + 0.5) as usize)
        } else {
            (((h as f64 * size as f64 / w as f64) + 0.5) as usize, size)
        };
        let r = self.resize(nh.max(size), nw.max(size));
        let top = (r.height - size) / 2;
        let left = (r.width - size) / 2;
        r.crop(top, left, size, size).expect("center crop inside resized image")
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// 256-bin histogram over all channels.
    pub fn histogram(&self) -> [u32; 256] {
        let mut h = [0u32; 256];
        for &v in &self.data {
            h[quantize(v) as usize] += 1;
        }
        h
    }

    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in [self.channels, self.height, self.width]
            .into_iter()
            .map(|d| d as u32)
            .chain(self.data.iter().map(|v| v.to_bits()))
        {
            for b in v.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    pub fn normalize(&self, norm: &Normalization) -> Result<NormalizedImage> {
        if norm.mean.len() != self.channels || norm.std.len() != self.channels {
            return Err(shape_err(
                "Image::normalize",
                alloc::format!("{} channel statistics", self.channels),
                norm.mean.len(),
            ));
        }
        let plane = self.height * self.width;
        let data = self
            .data
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let c = i / plane;
                (f64::from(v) - norm.mean[c]) / norm.std[c]
            })
            .collect();
        Ok(NormalizedImage {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        })
    }
}

/// Maps `[0, 1]` to an 8-bit level.
#[inline]
pub fn quantize(v: f32) -> u8 {
    libm::roundf(v.clamp(0.0, 1.0) * 255.0) as u8
}

/// Per-channel normalization constants supplied by a backbone.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalization {
    /// Constants used by CLIP-family image encoders.
    pub fn clip() -> Self {
        Self {
            mean: vec![0.481_454_66, 0.457_827_5, 0.408_210_73],
            std: vec![0.268_629_54, 0.261_302_58, 0.275_777_11],
        }
    }
}

/// Backbone input: a normalized `C x H x W` array.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}
