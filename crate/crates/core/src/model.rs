//! The trainable model: fixed rescaling, meta-network and vision projector,
//! wired to a pair of frozen encoders.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::backbone::{embed_class_name, encode_image, TextBackbone, VisionBackbone};
use crate::error::{shape_err, Error, Result};
use crate::features::{content_features, frg_input_width, style_features, FeaturesConfig, Frg, PromptSeed};
use crate::image::Image;
use crate::losses::{class_posterior, PosteriorRow};
use crate::params::Parameterized;
use crate::projectors::{PvConfig, VisionProjector};
use crate::promptlearner::{prompt_embedding_node, MetaNetwork, PromptInit, RhoConfig};
use crate::tensor::Tensor;

/// Configuration of every trainable or fixed component above the encoders.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub features: FeaturesConfig,
    pub rho: RhoConfig,
    pub pv: PvConfig,
}

/// The two frozen encoders.
#[derive(Clone, Copy)]
pub struct Encoders<'a> {
    pub vision: &'a dyn VisionBackbone,
    pub text: &'a dyn TextBackbone,
}

impl<'a> Encoders<'a> {
    pub fn checksum(&self) -> u64 {
        self.vision.checksum() ^ self.text.checksum().rotate_left(17)
    }
}

/// What the frozen vision encoder yields for one view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewFeatures {
    pub seed: PromptSeed,
    pub pooled: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptModel {
    pub content_layers: Vec<usize>,
    pub std_epsilon: f64,
    pub frg: Frg,
    pub rho: MetaNetwork,
    pub pv: VisionProjector,
}

impl PromptModel {
    pub fn new(enc: Encoders<'_>, cfg: &ModelConfig, seed: u64) -> Result<Self> {
        let vision = enc.vision;
        let text = enc.text;
        cfg.features.validate(vision.layer_count())?;
        let layers = cfg.features.layers(vision.layer_count());
        let width = frg_input_width(vision.layer_dims(), &layers);
        let frg = Frg::seeded(width, cfg.features.d_seed, seed);
        let template = match cfg.rho.init {
            PromptInit::Manual => Some(text.tokenize(&cfg.rho.template)?),
            _ => None,
        };
        let rho = MetaNetwork::new(&cfg.rho, cfg.features.d_seed, text.embed_dim(), template.as_ref(), seed)?;
        let d_joint = text.output_dim();
        if let Some(d) = cfg.pv.d_joint {
            if d != d_joint {
                return Err(Error::Config(format!(
                    "pv.d_joint is {d} but the text encoder produces {d_joint}-wide embeddings"
                )));
            }
        }
        let pv = VisionProjector::new(vision.output_dim(), d_joint, &cfg.pv, seed);
        Ok(Self {
            content_layers: layers,
            std_epsilon: cfg.features.std_epsilon,
            frg,
            rho,
            pv,
        })
    }

    /// Encodes one `[0, 1]` image at the encoder's input resolution.
    pub fn view_features(&self, vision: &dyn VisionBackbone, img: &Image) -> Result<ViewFeatures> {
        let norm = img.normalize(vision.normalization())?;
        let stack = encode_image(vision, &norm)?;
        let content = content_features(&stack, &self.content_layers)?;
        let style = style_features(&stack, self.std_epsilon)?;
        let seed = self.frg.apply(&content, &style)?;
        Ok(ViewFeatures {
            seed,
            pooled: stack.final_pooled,
        })
    }

    /// Eval-mode joint-space image embedding.
    pub fn image_embedding(&self, feats: &ViewFeatures) -> Result<Vec<f64>> {
        self.pv.project_eval(&feats.pooled)
    }

    /// `K x D` prompt embeddings conditioned on one image.
    pub fn prompt_embeddings(&self, text: &dyn TextBackbone, seed: &PromptSeed, class_tokens: &[Tensor]) -> Result<Tensor> {
        if class_tokens.is_empty() {
            return Err(Error::Validation("label set is empty".into()));
        }
        let ctx = self.rho.generate_context(seed)?;
        let mut g = Graph::new();
        let c = g.constant(ctx);
        let mut rows = Vec::with_capacity(class_tokens.len());
        for t in class_tokens {
            let e = prompt_embedding_node(&mut g, text, c, t)?;
            rows.push(e);
        }
        let all = g.concat_rows(&rows);
        Ok(g.value(all).clone())
    }

    /// Class posterior over `class_tokens` for one image.
    pub fn posterior(&self, enc: Encoders<'_>, img: &Image, class_tokens: &[Tensor], temperature: f64) -> Result<PosteriorRow> {
        let feats = self.view_features(enc.vision, img)?;
        let z = self.image_embedding(&feats)?;
        if class_tokens.len() == 1 {
            return Ok(PosteriorRow::from_logits(alloc::vec![0.0]));
        }
        let prompts = self.prompt_embeddings(enc.text, &feats.seed, class_tokens)?;
        class_posterior(&z, &prompts, temperature)
    }

    pub fn param_checksum(&self) -> u64 {
        self.rho.param_checksum() ^ self.pv.param_checksum().rotate_left(29)
    }

    pub fn check_compatible(&self, enc: Encoders<'_>) -> Result<()> {
        if self.pv.input_dim() != enc.vision.output_dim() {
            return Err(shape_err("vision projector input", enc.vision.output_dim(), self.pv.input_dim()));
        }
        if self.rho.embed_dim() != enc.text.embed_dim() {
            return Err(shape_err("meta-network output", enc.text.embed_dim(), self.rho.embed_dim()));
        }
        if self.pv.d_joint() != enc.text.output_dim() {
            return Err(shape_err("joint width", enc.text.output_dim(), self.pv.d_joint()));
        }
        Ok(())
    }
}

/// Token embeddings for every class name.
pub fn class_token_table(text: &dyn TextBackbone, names: &[String]) -> Result<Vec<Tensor>> {
    names.iter().map(|n| embed_class_name(text, n)).collect()
}

/// Vocabulary the toy text encoder needs for a template and a set of class names.
pub fn toy_vocabulary<'a>(template: &str, names: impl IntoIterator<Item = &'a String>) -> Vec<String> {
    let mut v: Vec<String> = crate::backbone::words(template);
    for n in names {
        v.extend(crate::backbone::words(n));
    }
    let mut seen = alloc::collections::BTreeSet::new();
    v.retain(|w| seen.insert(w.clone()));
    v
}
