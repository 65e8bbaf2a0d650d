//! Toy multimodal decoder-only transformer.
//!
//! The image enters as a patch-embedded visual prefix; text tokens follow.
//! Text attends causally to text and freely to the whole prefix; the prefix
//! attends bidirectionally within itself. Pre-LN blocks, learned positions,
//! untied LM head.

mod forward;
mod generate;
mod params;


pub use forward::{attention_mask, ForwardOutput, Traces};
pub use generate::{final_layer_topk, logit_lens, GenerationResult};
pub use params::{ParamId, ParamSet};

use crate::error::{Error, Result};
use crate::scalar::{fl, Scalar};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_multiplier: usize,
    pub image_size: usize,
    pub patch_size: usize,
    pub max_seq_len: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 96,
            n_layers: 4,
            n_heads: 4,
            ffn_multiplier: 4,
            image_size: 64,
            patch_size: 8,
            max_seq_len: 192,
            vocab_size: 0, // set from the vocabulary before init
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.vocab_size < 8 {
            return Err(Error::Config("vocab_size must cover the special tokens".into()));
        }
        if self.max_seq_len <= self.n_visual_tokens() + 2 {
            return Err(Error::Config("max_seq_len leaves no room for text".into()));
        }
        Ok(())
    }

    pub fn patches_per_side(&self) -> usize {
        self.image_size / self.patch_size
    }

    pub fn n_visual_tokens(&self) -> usize {
        self.patches_per_side() * self.patches_per_side()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * 3
    }

    /// Closed-form parameter count for this architecture.
    pub fn param_count(&self) -> usize {
        let d = self.d_model;
        let v = self.vocab_size;
        let f = self.ffn_multiplier * d;
        let embed = v * d + self.max_seq_len * d;
        let patch = self.patch_dim() * d + d;
        let per_layer = 2 * d            // ln1
            + 4 * (d * d + d)            // q,k,v,o projections with bias
            + 2 * d                      // ln2
            + d * f + f                  // ffn in
            + f * d + d; // ffn out
        let head = 2 * d + d * v; // final ln + untied head
        embed + patch + self.n_layers * per_layer + head
    }
}

/// Ids of every named parameter in one transformer block.
#[derive(Debug, Clone)]
pub struct LayerIds {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ffn1_w: ParamId,
    pub ffn1_b: ParamId,
    pub ffn2_w: ParamId,
    pub ffn2_b: ParamId,
}

#[derive(Debug, Clone)]
pub struct ModelLayout {
    pub token_embed: ParamId,
    pub pos_embed: ParamId,
    pub patch_w: ParamId,
    pub patch_b: ParamId,
    pub layers: Vec<LayerIds>,
    pub final_ln_g: ParamId,
    pub final_ln_b: ParamId,
    pub lm_head: ParamId,
}

/// Parameters plus the layout that names them.
#[derive(Clone)]
pub struct Model<F: Scalar> {
    pub config: ModelConfig,
    pub params: ParamSet<F>,
    pub layout: ModelLayout,
}

pub const LN_EPS: f64 = 1e-5;

/// Deterministic initialization: N(0, 0.02) for projection and embedding
/// weights, N(0, 0.01) for positions, ones/zeros for layer norms, zero biases.
pub fn init_model<F: Scalar>(config: &ModelConfig) -> Result<Model<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut set = ParamSet::new();
    let d = config.d_model;
    let f = config.ffn_multiplier * d;
    let v = config.vocab_size;

    let mut normal = |set: &mut ParamSet<F>, name: &str, shape: &[usize], std: f64| {
        let arr = gaussian(&mut rng, shape, std);
        set.add(name, arr)
    };

    let token_embed = normal(&mut set, "token_embed", &[v, d], 0.02);
    let pos_embed = normal(&mut set, "pos_embed", &[config.max_seq_len, d], 0.01);
    let patch_w = normal(&mut set, "patch_w", &[config.patch_dim(), d], 0.02);
    let patch_b = set.add("patch_b", ArrayD::zeros(IxDyn(&[d])));

    let mut layers = Vec::with_capacity(config.n_layers);
    for l in 0..config.n_layers {
        let p = |s: &str| format!("layer{l}.{s}");
        layers.push(LayerIds {
            ln1_g: set.add(&p("ln1_g"), ArrayD::from_elem(IxDyn(&[d]), F::one())),
            ln1_b: set.add(&p("ln1_b"), ArrayD::zeros(IxDyn(&[d]))),
            wq: normal(&mut set, &p("wq"), &[d, d], 0.02),
            bq: set.add(&p("bq"), ArrayD::zeros(IxDyn(&[d]))),
            wk: normal(&mut set, &p("wk"), &[d, d], 0.02),
            bk: set.add(&p("bk"), ArrayD::zeros(IxDyn(&[d]))),
            wv: normal(&mut set, &p("wv"), &[d, d], 0.02),
            bv: set.add(&p("bv"), ArrayD::zeros(IxDyn(&[d]))),
            wo: normal(&mut set, &p("wo"), &[d, d], 0.02),
            bo: set.add(&p("bo"), ArrayD::zeros(IxDyn(&[d]))),
            ln2_g: set.add(&p("ln2_g"), ArrayD::from_elem(IxDyn(&[d]), F::one())),
            ln2_b: set.add(&p("ln2_b"), ArrayD::zeros(IxDyn(&[d]))),
            ffn1_w: normal(&mut set, &p("ffn1_w"), &[d, f], 0.02),
            ffn1_b: set.add(&p("ffn1_b"), ArrayD::zeros(IxDyn(&[f]))),
            ffn2_w: normal(&mut set, &p("ffn2_w"), &[f, d], 0.02),
            ffn2_b: set.add(&p("ffn2_b"), ArrayD::zeros(IxDyn(&[d]))),
        });
    }

    let final_ln_g = set.add("final_ln_g", ArrayD::from_elem(IxDyn(&[d]), F::one()));
    let final_ln_b = set.add("final_ln_b", ArrayD::zeros(IxDyn(&[d])));
    let lm_head = normal(&mut set, "lm_head", &[d, v], 0.02);

    Ok(Model {
        config: config.clone(),
        params: set,
        layout: ModelLayout {
            token_embed,
            pos_embed,
            patch_w,
            patch_b,
            layers,
            final_ln_g,
            final_ln_b,
            lm_head,
        },
    })
}

pub(crate) fn gaussian<F: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> ArrayD<F> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        fl::<F>(z * std)
    })
}
