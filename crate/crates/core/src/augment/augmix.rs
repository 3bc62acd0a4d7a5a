//! Compositional view: `k` random operation chains mixed with simplex
//! weights, then blended with the original through a skip weight.

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Beta, Distribution, Gamma};
use serde::{Deserialize, Serialize};

use super::ops;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::rng::{self, StreamRng};

/// Operation families. The default palette leaves out brightness, contrast,
/// color and sharpness, which overlap common corruption benchmarks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Identity,
    Autocontrast,
    Equalize,
    Posterize,
    Rotate,
    Solarize,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

impl OpKind {
    pub const DEFAULT_PALETTE: [OpKind; 9] = [
        OpKind::Autocontrast,
        OpKind::Equalize,
        OpKind::Posterize,
        OpKind::Rotate,
        OpKind::Solarize,
        OpKind::ShearX,
        OpKind::ShearY,
        OpKind::TranslateX,
        OpKind::TranslateY,
    ];
}

/// A concrete operation with its sampled magnitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", content = "arg", rename_all = "snake_case")]
pub enum AugOp {
    Identity,
    Autocontrast,
    Equalize,
    Posterize(u32),
    Rotate(f32),
    Solarize(f32),
    ShearX(f32),
    ShearY(f32),
    TranslateX(f32),
    TranslateY(f32),
}

impl AugOp {
    pub fn apply(&self, img: &Image) -> Image {
        match *self {
            AugOp::Identity => img.clone(),
            AugOp::Autocontrast => ops::autocontrast(img),
            AugOp::Equalize => ops::equalize(img),
            AugOp::Posterize(b) => ops::posterize(img, b),
            AugOp::Rotate(d) => ops::rotate(img, d),
            AugOp::Solarize(t) => ops::solarize(img, t),
            AugOp::ShearX(f) => ops::shear_x(img, f),
            AugOp::ShearY(f) => ops::shear_y(img, f),
            AugOp::TranslateX(p) => ops::translate_x(img, p),
            AugOp::TranslateY(p) => ops::translate_y(img, p),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugMixConfig {
    /// Number of chains `k`.
    pub width: usize,
    pub depth_min: usize,
    pub depth_max: usize,
    /// Magnitude level in `1..=10`.
    pub severity: u32,
    /// Concentration for both the chain weights and the skip weight.
    pub alpha: f64,
    pub palette: Vec<OpKind>,
}

impl Default for AugMixConfig {
    fn default() -> Self {
        Self {
            width: 3,
            depth_min: 1,
            depth_max: 3,
            severity: 3,
            alpha: 1.0,
            palette: OpKind::DEFAULT_PALETTE.to_vec(),
        }
    }
}

impl AugMixConfig {
    pub fn validate(&self) -> Result<()> {
        if self.palette.is_empty() {
            return Err(Error::Config("augment.augmix.palette is empty".into()));
        }
        if self.width == 0 {
            return Err(Error::Config("augment.augmix.width must be at least 1".into()));
        }
        if self.depth_min == 0 || self.depth_min > self.depth_max {
            return Err(Error::Config("augment.augmix depth range must satisfy 1 <= min <= max".into()));
        }
        if !(1..=10).contains(&self.severity) {
            return Err(Error::Config("augment.augmix.severity must lie in 1..=10".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config("augment.augmix.alpha must be positive".into()));
        }
        Ok(())
    }
}

/// Fully sampled mixing plan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugMixRecipe {
    pub weights: Vec<f64>,
    pub skip: f64,
    pub chains: Vec<Vec<AugOp>>,
}

impl AugMixRecipe {
    pub fn validate(&self) -> Result<()> {
        if self.chains.is_empty() || self.chains.len() != self.weights.len() {
            return Err(Error::Config(format!(
                "recipe has {} chains and {} weights",
                self.chains.len(),
                self.weights.len()
            )));
        }
        let s: f64 = self.weights.iter().sum();
        if self.weights.iter().any(|w| !(*w >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return Err(Error::Config("recipe weights are not on the simplex".into()));
        }
        if !(0.0..=1.0).contains(&self.skip) {
            return Err(Error::Config("recipe skip weight outside [0, 1]".into()));
        }
        Ok(())
    }
}

fn level(r: &mut StreamRng, severity: u32) -> f32 {
    r.random_range(0.1..=severity as f32)
}

fn signed(r: &mut StreamRng, v: f32) -> f32 {
    if r.random_bool(0.5) {
        -v
    } else {
        v
    }
}

fn sample_op(kind: OpKind, severity: u32, size: usize, r: &mut StreamRng) -> AugOp {
    let lv = level(r, severity);
    let int_param = |max: f32| libm::floorf(lv * max / 10.0);
    let float_param = |max: f32| lv * max / 10.0;
    match kind {
        OpKind::Identity => AugOp::Identity,
        OpKind::Autocontrast => AugOp::Autocontrast,
        OpKind::Equalize => AugOp::Equalize,
        OpKind::Posterize => AugOp::Posterize((4 - int_param(4.0) as u32).max(1)),
        OpKind::Rotate => AugOp::Rotate(signed(r, int_param(30.0))),
        OpKind::Solarize => AugOp::Solarize((256.0 - int_param(256.0)) / 256.0),
        OpKind::ShearX => AugOp::ShearX(signed(r, float_param(0.3))),
        OpKind::ShearY => AugOp::ShearY(signed(r, float_param(0.3))),
        OpKind::TranslateX => AugOp::TranslateX(signed(r, int_param(size as f32 / 3.0))),
        OpKind::TranslateY => AugOp::TranslateY(signed(r, int_param(size as f32 / 3.0))),
    }
}

/// Draws chain weights from a symmetric Dirichlet and the skip weight from
/// a symmetric Beta. `image_size` scales translations.
pub fn sample_recipe(cfg: &AugMixConfig, image_size: usize, seed: u64) -> Result<AugMixRecipe> {
    cfg.validate()?;
    let mut r = rng::rng(seed);
    let gamma = Gamma::new(cfg.alpha, 1.0).map_err(|e| Error::Config(format!("augmix alpha: {e}")))?;
    let mut weights: Vec<f64> = (0..cfg.width).map(|_| gamma.sample(&mut r)).collect();
    let s: f64 = weights.iter().sum();
    if s > 0.0 {
        for w in &mut weights {
            *w /= s;
        }
    } else {
        let k = weights.len() as f64;
        weights.iter_mut().for_each(|w| *w = 1.0 / k);
    }
    let beta = Beta::new(cfg.alpha, cfg.alpha).map_err(|e| Error::Config(format!("augmix alpha: {e}")))?;
    let skip: f64 = beta.sample(&mut r).clamp(0.0, 1.0);
    let chains = (0..cfg.width)
        .map(|_| {
            let depth = r.random_range(cfg.depth_min..=cfg.depth_max);
            (0..depth)
                .map(|_| {
                    let kind = cfg.palette[r.random_range(0..cfg.palette.len())];
                    sample_op(kind, cfg.severity, image_size, &mut r)
                })
                .collect()
        })
        .collect();
    Ok(AugMixRecipe { weights, skip, chains })
}

/// `x2 = (1 - m) x + m sum_i w_i chain_i(x)`, clipped to `[0, 1]`.
pub fn augmix_view(x: &Image, recipe: &AugMixRecipe) -> Result<Image> {
    recipe.validate()?;
    if recipe.skip == 0.0 {
        return Ok(x.clone());
    }
    let m = recipe.skip as f32;
    let mut parts = Vec::with_capacity(recipe.chains.len());
    for (w, chain) in recipe.weights.iter().zip(&recipe.chains) {
        let mut img = x.clone();
        for op in chain {
            img = op.apply(&img);
        }
        parts.push((*w as f32, img));
    }
    let mix = ops::weighted_sum(&parts, x);
    // x + m (mix - x) keeps x exact whenever the chains reproduce it
    let mut out = x.clone();
    for (o, v) in out.data_mut().iter_mut().zip(mix.data()) {
        *o += m * (v - *o);
    }
    out.clamp01();
    Ok(out)
}
