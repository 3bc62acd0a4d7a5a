//! The image-conditioned meta-network and prompt assembly.
//!
//! One shared encoder (`Linear-ReLU-Linear`, `d_seed -> hidden -> embed`) feeds
//! `M` parallel affine decoders; decoder `m` emits context token `c_m`. The
//! prompt for class `y` is `[c_1; ...; c_M; CLS_y]` with the class tokens last.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId};
use crate::backbone::{check_tokens, encode_text, TextBackbone};
use crate::error::{shape_err, Error, Result};
use crate::features::PromptSeed;
use crate::params::Parameterized;
use crate::rng::{self, stream};
use crate::tensor::Tensor;

/// How the decoder biases (and so the step-0 context tokens) are set.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptInit {
    /// Template word embeddings (default template "a photo of a").
    Manual,
    /// Zero-mean Gaussian.
    Random,
    /// Zeros.
    None,
}

impl PromptInit {
    pub fn label(self) -> &'static str {
        match self {
            PromptInit::Manual => "manual",
            PromptInit::Random => "random",
            PromptInit::None => "none",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RhoConfig {
    pub context_length: usize,
    pub init: PromptInit,
    /// Bottleneck width; `None` resolves to `max(d_seed / 16, 16)`.
    pub hidden_width: Option<usize>,
    pub template: String,
    pub init_std: f64,
}

impl Default for RhoConfig {
    fn default() -> Self {
        Self {
            context_length: 4,
            init: PromptInit::Manual,
            hidden_width: None,
            template: String::from("a photo of a"),
            init_std: 0.02,
        }
    }
}

impl RhoConfig {
    pub fn resolved_hidden(&self, d_seed: usize) -> usize {
        self.hidden_width.unwrap_or((d_seed / 16).max(16))
    }
}

/// Meta-network parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaNetwork {
    enc_w1: Tensor,
    enc_b1: Tensor,
    enc_w2: Tensor,
    enc_b2: Tensor,
    dec_w: Vec<Tensor>,
    dec_b: Vec<Tensor>,
}

impl MetaNetwork {
    /// `template` holds the template's token embeddings and is required for
    /// [`PromptInit::Manual`]. Under manual initialization the decoder weights
    /// start at zero so the step-0 tokens equal the template exactly; when the
    /// template is shorter than `M` the remaining biases start at zero.
    pub fn new(
        cfg: &RhoConfig,
        d_seed: usize,
        embed_dim: usize,
        template: Option<&Tensor>,
        seed: u64,
    ) -> Result<Self> {
        let m = cfg.context_length;
        if m == 0 {
            return Err(Error::Validation("context length must be at least 1".into()));
        }
        let hidden = cfg.resolved_hidden(d_seed);
        if hidden == 0 || d_seed == 0 || embed_dim == 0 {
            return Err(Error::Config("meta-network widths must be positive".into()));
        }
        let mut r = rng::rng(rng::derive(seed, stream::RHO));
        let fan = |n: usize| 1.0 / libm::sqrt(n as f64);
        let enc_w1 = Tensor::randn(d_seed, hidden, fan(d_seed), &mut r);
        let enc_b1 = Tensor::zeros(1, hidden);
        let enc_w2 = Tensor::randn(hidden, embed_dim, fan(hidden), &mut r);
        let enc_b2 = Tensor::zeros(1, embed_dim);
        let mut dec_w = Vec::with_capacity(m);
        let mut dec_b = Vec::with_capacity(m);
        for i in 0..m {
            let (w, b) = match cfg.init {
                PromptInit::Manual => {
                    let t = template.ok_or_else(|| {
                        Error::Config("manual prompt initialization needs template embeddings".into())
                    })?;
                    if t.cols() != embed_dim {
                        return Err(shape_err("MetaNetwork::new template", embed_dim, t.cols()));
                    }
                    let b = if i < t.rows() {
                        Tensor::row_vector(t.row(i).to_vec())
                    } else {
                        Tensor::zeros(1, embed_dim)
                    };
                    (Tensor::zeros(embed_dim, embed_dim), b)
                }
                PromptInit::Random => (
                    Tensor::randn(embed_dim, embed_dim, fan(embed_dim), &mut r),
                    Tensor::randn(1, embed_dim, cfg.init_std, &mut r),
                ),
                PromptInit::None => (
                    Tensor::randn(embed_dim, embed_dim, fan(embed_dim), &mut r),
                    Tensor::zeros(1, embed_dim),
                ),
            };
            dec_w.push(w);
            dec_b.push(b);
        }
        Ok(Self {
            enc_w1,
            enc_b1,
            enc_w2,
            enc_b2,
            dec_w,
            dec_b,
        })
    }

    pub fn context_length(&self) -> usize {
        self.dec_w.len()
    }

    pub fn d_seed(&self) -> usize {
        self.enc_w1.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.enc_w2.cols()
    }

    /// Decoder `m` as `(weight, bias)`.
    pub fn decoder_mut(&mut self, m: usize) -> (&mut Tensor, &mut Tensor) {
        (&mut self.dec_w[m], &mut self.dec_b[m])
    }

    /// Graph forward for a `B x d_seed` seed node; returns `M` nodes of shape
    /// `B x embed_dim`, one per decoder. `leaves` come from [`Parameterized::bind`].
    pub fn forward(&self, g: &mut Graph, leaves: &[NodeId], seeds: NodeId) -> Vec<NodeId> {
        let h = g.matmul(seeds, leaves[0]);
        let h = g.add_row(h, leaves[1]);
        let h = g.relu(h);
        let h = g.matmul(h, leaves[2]);
        let h = g.add_row(h, leaves[3]);
        (0..self.context_length())
            .map(|m| {
                let c = g.matmul(h, leaves[4 + 2 * m]);
                g.add_row(c, leaves[5 + 2 * m])
            })
            .collect()
    }

    /// Shared encoder output for one seed.
    pub fn encode_seed(&self, seed: &PromptSeed) -> Result<Vec<f64>> {
        self.check_seed(seed)?;
        let mut g = Graph::new();
        let leaves = self.bind(&mut g, false);
        let s = g.constant(Tensor::row_vector(seed.0.clone()));
        let h = g.matmul(s, leaves[0]);
        let h = g.add_row(h, leaves[1]);
        let h = g.relu(h);
        let h = g.matmul(h, leaves[2]);
        let h = g.add_row(h, leaves[3]);
        Ok(g.value(h).data().to_vec())
    }

    /// The `M x embed_dim` context tokens for one image.
    pub fn generate_context(&self, seed: &PromptSeed) -> Result<Tensor> {
        self.check_seed(seed)?;
        let mut g = Graph::new();
        let leaves = self.bind(&mut g, false);
        let s = g.constant(Tensor::row_vector(seed.0.clone()));
        let outs = self.forward(&mut g, &leaves, s);
        let rows: Vec<&[f64]> = outs.iter().map(|o| g.value(*o).data()).collect();
        Tensor::from_rows(&rows)
    }

    fn check_seed(&self, seed: &PromptSeed) -> Result<()> {
        if seed.width() != self.d_seed() {
            return Err(shape_err("generate_context", self.d_seed(), seed.width()));
        }
        Ok(())
    }
}

impl Parameterized for MetaNetwork {
    fn params(&self) -> Vec<&Tensor> {
        let mut v = alloc::vec![&self.enc_w1, &self.enc_b1, &self.enc_w2, &self.enc_b2];
        for (w, b) in self.dec_w.iter().zip(&self.dec_b) {
            v.push(w);
            v.push(b);
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = alloc::vec![
            &mut self.enc_w1,
            &mut self.enc_b1,
            &mut self.enc_w2,
            &mut self.enc_b2
        ];
        for (w, b) in self.dec_w.iter_mut().zip(self.dec_b.iter_mut()) {
            v.push(w);
            v.push(b);
        }
        v
    }

    fn param_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["rho.enc.w1", "rho.enc.b1", "rho.enc.w2", "rho.enc.b2"]
            .iter()
            .map(|s| String::from(*s))
            .collect();
        for m in 0..self.context_length() {
            v.push(format!("rho.dec{m}.w"));
            v.push(format!("rho.dec{m}.b"));
        }
        v
    }
}

/// An assembled prompt `[c_1; ...; c_M; CLS_y]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub context: Tensor,
    pub class_tokens: Tensor,
    pub class_id: usize,
}

impl PromptBundle {
    pub fn tokens(&self) -> Tensor {
        Tensor::concat_rows(&[&self.context, &self.class_tokens]).expect("widths checked at assembly")
    }

    pub fn len(&self) -> usize {
        self.context.rows() + self.class_tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn assemble_prompt(
    context: &Tensor,
    class_tokens: &Tensor,
    class_id: usize,
    capacity: usize,
) -> Result<PromptBundle> {
    if context.rows() == 0 {
        return Err(Error::Validation("prompt needs at least one context token".into()));
    }
    if class_tokens.rows() == 0 {
        return Err(Error::Validation("prompt needs class tokens".into()));
    }
    if context.cols() != class_tokens.cols() {
        return Err(shape_err("assemble_prompt", context.cols(), class_tokens.cols()));
    }
    let len = context.rows() + class_tokens.rows();
    if len > capacity {
        return Err(Error::Truncation { len, capacity });
    }
    Ok(PromptBundle {
        context: context.clone(),
        class_tokens: class_tokens.clone(),
        class_id,
    })
}

pub fn prompt_embedding(backbone: &dyn TextBackbone, bundle: &PromptBundle) -> Result<Vec<f64>> {
    encode_text(backbone, &bundle.tokens())
}

/// Graph form of [`prompt_embedding`]: context node (`M x E`) plus constant
/// class tokens through the text encoder.
pub fn prompt_embedding_node(
    g: &mut Graph,
    backbone: &dyn TextBackbone,
    context: NodeId,
    class_tokens: &Tensor,
) -> Result<NodeId> {
    let len = g.value(context).rows() + class_tokens.rows();
    if len > backbone.context_capacity() {
        return Err(Error::Truncation {
            len,
            capacity: backbone.context_capacity(),
        });
    }
    let cls = g.constant(class_tokens.clone());
    let tokens = g.concat_rows(&[context, cls]);
    check_tokens(backbone, g.value(tokens))?;
    backbone.forward(g, tokens)
}
