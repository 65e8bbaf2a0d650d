//! Greedy decoding and the layer-wise logit lens.

use super::forward::{project_to_logits, softmax_f, Traces};
use super::Model;
use crate::error::Result;
use crate::protocol::{EOS_ID, LOC_ID, REJ_ID};
use crate::scalar::Scalar;
use crate::tensor::Tape;
use ndarray::{Array1, Array2, Ix2};

pub struct GenerationResult<F: Scalar> {
    /// Newly generated token ids (prompt excluded).
    pub output_ids: Vec<usize>,
    /// Final-layer embedding at the first emitted grounding token, if any.
    pub loc_embedding: Option<Array1<F>>,
    /// Full-sequence position of that grounding token.
    pub loc_trace_position: Option<usize>,
    pub n_vis: usize,
    pub prompt_len: usize,
    pub hidden_trace: Option<Vec<Array2<F>>>,
    pub attention_trace: Option<Vec<ndarray::Array3<F>>>,
}

impl<F: Scalar> Model<F> {
    /// Greedy decoding: argmax each step (lowest id wins ties), stopping at
    /// `<EOS>` or `max_new_tokens`. A prompt already ending in `<EOS>`
    /// generates nothing.
    pub fn generate(
        &self,
        image: Option<&ndarray::Array3<f32>>,
        prompt_ids: &[usize],
        max_new_tokens: usize,
        introspect: bool,
    ) -> Result<GenerationResult<F>> {
        assert!(!prompt_ids.is_empty(), "generate requires a non-empty prompt");
        let mut seq: Vec<usize> = prompt_ids.to_vec();
        let mut generated = Vec::new();
        if *prompt_ids.last().unwrap() != EOS_ID {
            for _ in 0..max_new_tokens {
                let mut tape = Tape::<F>::no_grad();
                let out = self.forward(&mut tape, image, &seq, false)?;
                let logits = tape.value(out.logits);
                let l2 = logits.view().into_dimensionality::<Ix2>().unwrap();
                let last = l2.row(l2.nrows() - 1);
                let next = argmax_first(&last);
                seq.push(next);
                generated.push(next);
                if next == EOS_ID {
                    break;
                }
            }
        }

        // One pass over the finished sequence for the embedding and traces.
        let mut tape = Tape::<F>::no_grad();
        let out = self.forward(&mut tape, image, &seq, introspect)?;
        let n_vis = out.n_vis;
        let prompt_len = prompt_ids.len();

        let grounding_offset = generated
            .iter()
            .position(|&t| t == LOC_ID || t == REJ_ID);
        let (loc_embedding, loc_trace_position) = match grounding_offset {
            Some(off) => {
                let pos = n_vis + prompt_len + off;
                let hidden = tape.value(out.hidden);
                let h2 = hidden.view().into_dimensionality::<Ix2>().unwrap();
                (Some(h2.row(pos).to_owned()), Some(pos))
            }
            None => (None, None),
        };

        let (hidden_trace, attention_trace) = match out.traces {
            Some(Traces { hidden_states, attention }) => (Some(hidden_states), Some(attention)),
            None => (None, None),
        };

        Ok(GenerationResult {
            output_ids: generated,
            loc_embedding,
            loc_trace_position,
            n_vis,
            prompt_len,
            hidden_trace,
            attention_trace,
        })
    }
}

fn argmax_first<F: Scalar>(row: &ndarray::ArrayView1<'_, F>) -> usize {
    let mut best = 0usize;
    let mut best_v = row[0];
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Applies the final normalization and LM head to the hidden state of every
/// layer at `position`, reporting the probability of each watch token.
/// Output shape: `(n_layers+1, watch.len())`.
pub fn logit_lens<F: Scalar>(
    model: &Model<F>,
    hidden_trace: &[Array2<F>],
    position: usize,
    watch: &[usize],
) -> Array2<F> {
    let mut table = Array2::<F>::zeros((hidden_trace.len(), watch.len()));
    for (l, hidden) in hidden_trace.iter().enumerate() {
        let logits = project_to_logits(model, &hidden.row(position));
        let probs = softmax_f(&logits);
        for (w, &tok) in watch.iter().enumerate() {
            table[(l, w)] = probs[tok];
        }
    }
    table
}

/// Top-k token ids of the final layer at `position` (descending probability,
/// ascending id among ties).
pub fn final_layer_topk<F: Scalar>(
    model: &Model<F>,
    hidden_trace: &[Array2<F>],
    position: usize,
    k: usize,
) -> Vec<usize> {
    let last = hidden_trace.last().expect("non-empty trace");
    let logits = project_to_logits(model, &last.row(position));
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| {
        logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}
