//! Differentiable forward pass with optional introspection traces.

use super::{Model, ParamId, LN_EPS};
use crate::error::{Error, Result};
use crate::scalar::{fl, Scalar};
use crate::tensor::{Tape, Var};
use ndarray::{Array2, Array3, ArrayD, Ix2};
use std::sync::Arc;

/// Introspection payload: hidden states after the embedding and after each
/// block (`n_layers+1` entries over the full sequence), and per-layer
/// per-head attention weights.
pub struct Traces<F: Scalar> {
    pub hidden_states: Vec<Array2<F>>,
    pub attention: Vec<Array3<F>>,
}

pub struct ForwardOutput<F: Scalar> {
    /// Text-position logits, `(n_text, vocab)`.
    pub logits: Var,
    /// Final-normed hidden states over the full sequence, `(n_vis+n_text, d)`.
    pub hidden: Var,
    pub n_vis: usize,
    pub traces: Option<Traces<F>>,
}

/// Attention pattern: causal over the whole sequence except that the visual
/// prefix block is bidirectional within itself.
pub fn attention_mask(n_vis: usize, total: usize) -> Array2<bool> {
    let mut mask = Array2::<bool>::from_elem((total, total), false);
    for i in 0..total {
        for j in 0..total {
            mask[(i, j)] = j <= i || (i < n_vis && j < n_vis);
        }
    }
    mask
}

/// Flattens the image into per-patch rows `(n_vis, patch*patch*3)`.
fn patchify<F: Scalar>(image: &ndarray::Array3<f32>, patch: usize) -> Array2<F> {
    let (c, h, w) = image.dim();
    debug_assert_eq!(c, 3);
    let (ph, pw) = (h / patch, w / patch);
    let mut out = Array2::<F>::zeros((ph * pw, patch * patch * 3));
    for pi in 0..ph {
        for pj in 0..pw {
            let row = pi * pw + pj;
            let mut col = 0usize;
            for ch in 0..3 {
                for dy in 0..patch {
                    for dx in 0..patch {
                        out[(row, col)] = fl(image[(ch, pi * patch + dy, pj * patch + dx)] as f64);
                        col += 1;
                    }
                }
            }
        }
    }
    out
}

impl<F: Scalar> Model<F> {
    /// Registers every parameter as a tape leaf, in declaration order.
    /// Gradients map back through these vars after `backward`.
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        (0..self.params.len())
            .map(|i| tape.leaf(self.params.arc(ParamId(i))))
            .collect()
    }

    /// Convenience forward that binds parameters internally; use
    /// [`Model::forward_bound`] when gradients must be read back.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        image: Option<&ndarray::Array3<f32>>,
        tokens: &[usize],
        introspect: bool,
    ) -> Result<ForwardOutput<F>> {
        let leaves = self.bind(tape);
        self.forward_bound(tape, &leaves, image, tokens, introspect)
    }

    /// Runs the transformer over `[visual prefix] + tokens`, returning logits
    /// for the text positions. `image: None` omits the prefix entirely.
    pub fn forward_bound(
        &self,
        tape: &mut Tape<F>,
        leaves: &[Var],
        image: Option<&ndarray::Array3<f32>>,
        tokens: &[usize],
        introspect: bool,
    ) -> Result<ForwardOutput<F>> {
        assert_eq!(leaves.len(), self.params.len(), "leaf binding mismatch");
        let cfg = &self.config;
        let n_vis = if image.is_some() { cfg.n_visual_tokens() } else { 0 };
        let n_text = tokens.len();
        let total = n_vis + n_text;
        if total > cfg.max_seq_len {
            return Err(Error::SequenceTooLong { got: total, max: cfg.max_seq_len });
        }
        if n_text == 0 {
            return Err(Error::Config("forward requires at least one token".into()));
        }
        for &t in tokens {
            if t >= cfg.vocab_size {
                return Err(Error::TokenIdRange(t, cfg.vocab_size));
            }
        }

        let ids = &self.layout;
        let leaf = |id: ParamId| leaves[id.0];
        let tok_emb = tape.embedding(leaf(ids.token_embed), tokens);

        let mut x = if let Some(img) = image {
            if img.dim().1 != cfg.image_size || img.dim().2 != cfg.image_size {
                return Err(Error::Shape(format!(
                    "image {:?} does not match configured size {}",
                    img.dim(),
                    cfg.image_size
                )));
            }
            let patches = tape.constant(patchify::<F>(img, cfg.patch_size).into_dyn());
            let vis = tape.linear(patches, leaf(ids.patch_w), leaf(ids.patch_b));
            tape.concat_rows(vis, tok_emb)
        } else {
            tok_emb
        };

        let pos_ids: Vec<usize> = (0..total).collect();
        let pos = tape.embedding(leaf(ids.pos_embed), &pos_ids);
        x = tape.add(x, pos);

        let mask = Arc::new(attention_mask(n_vis, total));
        let mut traces = introspect.then(|| Traces {
            hidden_states: Vec::with_capacity(cfg.n_layers + 1),
            attention: Vec::with_capacity(cfg.n_layers),
        });
        if let Some(tr) = traces.as_mut() {
            tr.hidden_states.push(to2(tape.value(x)));
        }

        for layer in &ids.layers {
            let h = tape.layer_norm(x, leaf(layer.ln1_g), leaf(layer.ln1_b), LN_EPS);
            let q = tape.linear(h, leaf(layer.wq), leaf(layer.bq));
            let k = tape.linear(h, leaf(layer.wk), leaf(layer.bk));
            let v = tape.linear(h, leaf(layer.wv), leaf(layer.bv));
            let (attn, probs) = tape.mha(q, k, v, cfg.n_heads, Some(Arc::clone(&mask)));
            let attn = tape.linear(attn, leaf(layer.wo), leaf(layer.bo));
            x = tape.add(x, attn);

            let h2 = tape.layer_norm(x, leaf(layer.ln2_g), leaf(layer.ln2_b), LN_EPS);
            let f = tape.linear(h2, leaf(layer.ffn1_w), leaf(layer.ffn1_b));
            let f = tape.gelu(f);
            let f = tape.linear(f, leaf(layer.ffn2_w), leaf(layer.ffn2_b));
            x = tape.add(x, f);

            if let Some(tr) = traces.as_mut() {
                tr.hidden_states.push(to2(tape.value(x)));
                tr.attention.push(probs.0.as_ref().clone());
            }
        }

        let hidden = tape.layer_norm(x, leaf(ids.final_ln_g), leaf(ids.final_ln_b), LN_EPS);
        let text_hidden = tape.slice_rows(hidden, n_vis, n_text);
        let logits = tape.matmul(text_hidden, leaf(ids.lm_head));

        Ok(ForwardOutput { logits, hidden, n_vis, traces })
    }
}

fn to2<F: Scalar>(a: &ArrayD<F>) -> Array2<F> {
    a.view().into_dimensionality::<Ix2>().unwrap().to_owned()
}

/// Applies the final layer norm followed by the LM head to an arbitrary
/// hidden row; plain (non-tape) math shared by the logit lens.
pub(crate) fn project_to_logits<F: Scalar>(
    model: &Model<F>,
    hidden_row: &ndarray::ArrayView1<'_, F>,
) -> ndarray::Array1<F> {
    let g = model.params.value(model.layout.final_ln_g);
    let b = model.params.value(model.layout.final_ln_b);
    let d = hidden_row.len();
    let inv_d = fl::<F>(1.0 / d as f64);
    let mu = hidden_row.sum() * inv_d;
    let mut var = F::zero();
    for &v in hidden_row {
        var = var + (v - mu) * (v - mu);
    }
    var = var * inv_d;
    let rstd = (var + fl::<F>(LN_EPS)).sqrt().recip();
    let mut normed = ndarray::Array1::<F>::zeros(d);
    for i in 0..d {
        normed[i] = (hidden_row[i] - mu) * rstd * g[[i]] + b[[i]];
    }
    let head = model.params.value(model.layout.lm_head);
    let head2 = head.view().into_dimensionality::<Ix2>().unwrap();
    normed.dot(&head2)
}

pub(crate) fn softmax_f<F: Scalar>(z: &ndarray::Array1<F>) -> ndarray::Array1<F> {
    let max = z.iter().cloned().fold(F::neg_infinity(), F::max);
    let mut e = z.mapv(|x| (x - max).exp());
    let sum = e.sum();
    e.mapv_inplace(|x| x / sum);
    e
}
