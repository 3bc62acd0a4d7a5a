//! Augmented views `(x, x1, x2)` for each training image.

mod augmix;
mod moco;
pub mod ops;

pub use augmix::{augmix_view, sample_recipe, AugMixConfig, AugMixRecipe, AugOp, OpKind};
pub use moco::{moco_view, MocoConfig};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::image::Image;
use crate::rng::{self, stream};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub moco: MocoConfig,
    pub augmix: AugMixConfig,
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        self.moco.validate()?;
        self.augmix.validate()
    }
}

/// The original image with its two augmented views, all `[0, 1]` valued
/// and of equal shape; normalization happens at encode time.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedTriplet {
    pub x: Image,
    pub x1: Image,
    pub x2: Image,
    /// Parent seed; 0 when built directly from sub-seeds.
    pub seed: u64,
    /// `(moco, augmix)` sub-seeds.
    pub subseeds: (u64, u64),
    pub recipe: AugMixRecipe,
}

/// Sub-seeds for the two views of a triplet.
pub fn triplet_subseeds(seed: u64) -> (u64, u64) {
    (rng::derive(seed, stream::MOCO), rng::derive(seed, stream::AUGMIX))
}

pub fn make_triplet(x: &Image, seed: u64, cfg: &AugmentConfig) -> Result<AugmentedTriplet> {
    let (s1, s2) = triplet_subseeds(seed);
    let mut t = make_triplet_with_subseeds(x, s1, s2, cfg)?;
    t.seed = seed;
    Ok(t)
}

pub fn make_triplet_with_subseeds(x: &Image, moco_seed: u64, augmix_seed: u64, cfg: &AugmentConfig) -> Result<AugmentedTriplet> {
    let x1 = moco_view(x, moco_seed, &cfg.moco)?;
    let recipe = sample_recipe(&cfg.augmix, x.height().min(x.width()), augmix_seed)?;
    let x2 = augmix_view(x, &recipe)?;
    Ok(AugmentedTriplet {
        x: x.clone(),
        x1,
        x2,
        seed: 0,
        subseeds: (moco_seed, augmix_seed),
        recipe,
    })
}
