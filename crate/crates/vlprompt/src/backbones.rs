//! Frozen encoder construction from a run configuration.

use std::path::Path;

use vlprompt_core::backbone::{TextBackbone, ToyTextBackbone, ToyVisionBackbone, VisionBackbone};
use vlprompt_core::model::{toy_vocabulary, Encoders};

use crate::config::{BackboneKind, RunConfig};
use crate::error::{Error, Result};

pub struct Backbones {
    pub vision: Box<dyn VisionBackbone>,
    pub text: Box<dyn TextBackbone>,
}

impl Backbones {
    pub fn encoders(&self) -> Encoders<'_> {
        Encoders {
            vision: self.vision.as_ref(),
            text: self.text.as_ref(),
        }
    }

    /// Square input resolution of the vision encoder.
    pub fn image_size(&self) -> usize {
        self.vision.input_shape().1
    }
}

/// Builds the encoders. `class_names` are all names the text encoder must
/// be able to tokenize (source and targets).
pub fn build(cfg: &RunConfig, class_names: &[&[String]]) -> Result<Backbones> {
    match cfg.backbone.kind {
        BackboneKind::Toy => {
            let vision = ToyVisionBackbone::new(&cfg.backbone.toy, cfg.seed)?;
            let vocab = toy_vocabulary(&cfg.rho.template, class_names.iter().flat_map(|c| c.iter()));
            let text = ToyTextBackbone::new(&cfg.backbone.toy, cfg.seed, &vocab)?;
            Ok(Backbones {
                vision: Box::new(vision),
                text: Box::new(text),
            })
        }
        BackboneKind::Adapter => {
            let weights = cfg.backbone.adapter.weights.as_deref().ok_or_else(|| {
                Error::Config("backbone.kind=adapter requires backbone.adapter.weights".into())
            })?;
            if !Path::new(weights).exists() {
                return Err(Error::Config(format!("backbone.adapter.weights: {weights} does not exist")));
            }
            Err(Error::Unsupported(format!(
                "pretrained weights found at {weights}, but this build has no transformer encoder; \
                 implement VisionBackbone/TextBackbone for it and register it here"
            )))
        }
    }
}
