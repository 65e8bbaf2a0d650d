//! Visual grounding: dense image encoder, prompt projection, mask and box
//! decoders, and the rejection bypass that skips all of them.
//!
//! The encoder is a 3-block strided conv stack (total stride 8). The mask
//! decoder scores each feature cell by a scaled dot product against the
//! projected prompt, refines with a small per-cell MLP (residual on the
//! affinity) and bilinearly upsamples to image resolution. The box decoder
//! pools features with prompt cross-attention and regresses four
//! sigmoid-bounded, order-corrected corners.

use crate::error::{Error, Result};
use crate::model::{ParamId, ParamSet};
use crate::protocol::GroundingToken;
use crate::scalar::{fl, to_f64, Scalar};
use crate::tensor::{Tape, Var};
use ndarray::{Array1, Array2, ArrayD, Ix1, Ix2, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicUsize, Ordering};

/// Axis-aligned box in normalized image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        debug_assert!(x1 <= x2 && y1 <= y2, "corner order violated");
        Self { x1, y1, x2, y2 }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        let inter = iw * ih;
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Dense feature grid: one `d_ground` vector per stride-8 cell, stored
/// row-major as `(side*side, d_ground)`.
pub struct DenseFeatures<F: Scalar> {
    pub grid: Array2<F>,
    pub side: usize,
}

/// Decoder output; rejected outputs carry no mask and no box.
pub struct GroundingOutput<F: Scalar> {
    pub mask_logits: Option<Array2<F>>,
    pub bbox: Option<BBox>,
    pub rejected: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrounderConfig {
    pub image_size: usize,
    /// LLM hidden width feeding the prompt projection.
    pub d_model: usize,
    pub d_ground: usize,
    pub enc_channels: (usize, usize),
    pub mask_head_hidden: usize,
    pub bbox_hidden: usize,
    pub seed: u64,
}

impl Default for GrounderConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            d_model: 96,
            d_ground: 64,
            enc_channels: (16, 32),
            mask_head_hidden: 32,
            bbox_hidden: 64,
            seed: 0,
        }
    }
}

impl GrounderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size % 8 != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by the encoder stride 8",
                self.image_size
            )));
        }
        if self.d_ground == 0 || self.d_model == 0 {
            return Err(Error::Config("zero feature width".into()));
        }
        Ok(())
    }

    pub fn grid_side(&self) -> usize {
        self.image_size / 8
    }
}

#[derive(Debug, Clone)]
pub struct GrounderLayout {
    pub conv1_w: ParamId,
    pub conv1_b: ParamId,
    pub conv2_w: ParamId,
    pub conv2_b: ParamId,
    pub conv3_w: ParamId,
    pub conv3_b: ParamId,
    pub proj1_w: ParamId,
    pub proj1_b: ParamId,
    pub proj2_w: ParamId,
    pub proj2_b: ParamId,
    pub mask1_w: ParamId,
    pub mask1_b: ParamId,
    pub mask2_w: ParamId,
    pub mask2_b: ParamId,
    pub bbox1_w: ParamId,
    pub bbox1_b: ParamId,
    pub bbox2_w: ParamId,
    pub bbox2_b: ParamId,
}

pub struct Grounder<F: Scalar> {
    pub config: GrounderConfig,
    pub params: ParamSet<F>,
    pub layout: GrounderLayout,
    decode_calls: AtomicUsize,
}

impl<F: Scalar> Clone for Grounder<F> {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            params: self.params.clone(),
            layout: self.layout.clone(),
            decode_calls: AtomicUsize::new(self.decode_calls.load(Ordering::Relaxed)),
        }
    }
}

pub fn init_grounder<F: Scalar>(config: &GrounderConfig) -> Result<Grounder<F>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x67726e64);
    let mut set = ParamSet::new();
    let (c1, c2) = config.enc_channels;
    let cg = config.d_ground;
    let dm = config.d_model;
    let mh = config.mask_head_hidden;
    let bh = config.bbox_hidden;

    let mut normal = |set: &mut ParamSet<F>, name: &str, shape: &[usize], std: f64| {
        set.add(name, crate::model::gaussian::<F>(&mut rng, shape, std))
    };
    let zeros = |set: &mut ParamSet<F>, name: &str, shape: &[usize]| {
        set.add(name, ArrayD::<F>::zeros(IxDyn(shape)))
    };

    let layout = GrounderLayout {
        conv1_w: normal(&mut set, "conv1_w", &[c1, 3, 3, 3], 0.15),
        conv1_b: zeros(&mut set, "conv1_b", &[c1]),
        conv2_w: normal(&mut set, "conv2_w", &[c2, c1, 3, 3], 0.08),
        conv2_b: zeros(&mut set, "conv2_b", &[c2]),
        conv3_w: normal(&mut set, "conv3_w", &[cg, c2, 3, 3], 0.06),
        conv3_b: zeros(&mut set, "conv3_b", &[cg]),
        proj1_w: normal(&mut set, "proj1_w", &[dm, dm], 0.05),
        proj1_b: zeros(&mut set, "proj1_b", &[dm]),
        proj2_w: normal(&mut set, "proj2_w", &[dm, cg], 0.05),
        proj2_b: zeros(&mut set, "proj2_b", &[cg]),
        mask1_w: normal(&mut set, "mask1_w", &[cg + 1, mh], 0.05),
        mask1_b: zeros(&mut set, "mask1_b", &[mh]),
        mask2_w: normal(&mut set, "mask2_w", &[mh, 1], 0.05),
        mask2_b: zeros(&mut set, "mask2_b", &[1]),
        bbox1_w: normal(&mut set, "bbox1_w", &[2 * cg, bh], 0.05),
        bbox1_b: zeros(&mut set, "bbox1_b", &[bh]),
        bbox2_w: normal(&mut set, "bbox2_w", &[bh, 4], 0.05),
        bbox2_b: zeros(&mut set, "bbox2_b", &[4]),
    };

    Ok(Grounder { config: config.clone(), params: set, layout, decode_calls: AtomicUsize::new(0) })
}

impl<F: Scalar> Grounder<F> {
    pub fn bind(&self, tape: &mut Tape<F>) -> Vec<Var> {
        (0..self.params.len())
            .map(|i| tape.leaf(self.params.arc(ParamId(i))))
            .collect()
    }

    /// Times the mask/box decoders ran; the rejection bypass must keep this
    /// at zero for rejected samples.
    pub fn decode_call_count(&self) -> usize {
        self.decode_calls.load(Ordering::Relaxed)
    }

    pub fn reset_decode_calls(&self) {
        self.decode_calls.store(0, Ordering::Relaxed);
    }

    /// Dense features from the conv stack; `(grid_side^2, d_ground)` rows.
    pub fn encode_image_dense_bound(
        &self,
        tape: &mut Tape<F>,
        leaves: &[Var],
        image: &ndarray::Array3<f32>,
    ) -> Result<Var> {
        let s = self.config.image_size;
        if image.dim() != (3, s, s) {
            return Err(Error::Shape(format!(
                "image dims {:?}, expected (3,{s},{s})",
                image.dim()
            )));
        }
        let leaf = |id: ParamId| leaves[id.0];
        let x = tape.constant(image.mapv(|v| fl::<F>(v as f64)).into_dyn());
        let x = tape.conv2d(x, leaf(self.layout.conv1_w), leaf(self.layout.conv1_b), 2, 1);
        let x = tape.gelu(x);
        let x = tape.conv2d(x, leaf(self.layout.conv2_w), leaf(self.layout.conv2_b), 2, 1);
        let x = tape.gelu(x);
        let x = tape.conv2d(x, leaf(self.layout.conv3_w), leaf(self.layout.conv3_b), 2, 1);
        let g = self.config.grid_side();
        // (C, G, G) -> (C, G*G) -> (G*G, C)
        let x = tape.reshape(x, &[self.config.d_ground, g * g]);
        Ok(tape.transpose(x))
    }

    /// Two-layer MLP from the LLM grounding-token embedding `(1, d_model)`
    /// to the decoder prompt `(1, d_ground)`.
    pub fn project_prompt_bound(&self, tape: &mut Tape<F>, leaves: &[Var], loc_embedding: Var) -> Var {
        let leaf = |id: ParamId| leaves[id.0];
        let h = tape.linear(loc_embedding, leaf(self.layout.proj1_w), leaf(self.layout.proj1_b));
        let h = tape.gelu(h);
        tape.linear(h, leaf(self.layout.proj2_w), leaf(self.layout.proj2_b))
    }

    /// Mask logits at image resolution from features and prompt.
    pub fn decode_mask_bound(
        &self,
        tape: &mut Tape<F>,
        leaves: &[Var],
        features: Var,
        prompt: Var,
    ) -> Var {
        self.decode_calls.fetch_add(1, Ordering::Relaxed);
        let leaf = |id: ParamId| leaves[id.0];
        let g = self.config.grid_side();
        let scale = 1.0 / (self.config.d_ground as f64).sqrt();

        let prompt_col = tape.transpose(prompt); // (C,1)
        let affinity = tape.matmul(features, prompt_col); // (G*G,1)
        let affinity = tape.scale(affinity, scale);

        let prompt_vec = tape.reshape(prompt, &[self.config.d_ground]);
        let fp = tape.mul_row_broadcast(features, prompt_vec);
        let z = tape.concat_cols(fp, affinity);
        let h = tape.linear(z, leaf(self.layout.mask1_w), leaf(self.layout.mask1_b));
        let h = tape.gelu(h);
        let refine = tape.linear(h, leaf(self.layout.mask2_w), leaf(self.layout.mask2_b));
        let logits = tape.add(refine, affinity);
        let logits = tape.reshape(logits, &[g, g]);
        tape.bilinear_upsample(logits, self.config.image_size, self.config.image_size)
    }

    /// Pre-upsample affinity grid, exposed for the dot-product oracle.
    pub fn mask_affinity(&self, features: &Array2<F>, prompt: &Array1<F>) -> Array2<F> {
        let g = self.config.grid_side();
        let scale = fl::<F>(1.0 / (self.config.d_ground as f64).sqrt());
        let mut out = Array2::<F>::zeros((g, g));
        for r in 0..g * g {
            let mut dot = F::zero();
            for c in 0..self.config.d_ground {
                dot = dot + features[(r, c)] * prompt[c];
            }
            out[(r / g, r % g)] = dot * scale;
        }
        out
    }

    /// Corner box `[x1,y1,x2,y2]` from prompt-pooled features.
    pub fn decode_bbox_bound(
        &self,
        tape: &mut Tape<F>,
        leaves: &[Var],
        features: Var,
        prompt: Var,
    ) -> Var {
        self.decode_calls.fetch_add(1, Ordering::Relaxed);
        let leaf = |id: ParamId| leaves[id.0];
        let (pooled, _) = tape.mha(prompt, features, features, 1, None); // (1,C)
        let z = tape.concat_cols(pooled, prompt);
        let h = tape.linear(z, leaf(self.layout.bbox1_w), leaf(self.layout.bbox1_b));
        let h = tape.gelu(h);
        let raw = tape.linear(h, leaf(self.layout.bbox2_w), leaf(self.layout.bbox2_b));
        let raw = tape.reshape(raw, &[4]);
        tape.sigmoid_sorted_box(raw)
    }

    /// Value-level encoder for probes and evaluation.
    pub fn encode_image_dense(&self, image: &ndarray::Array3<f32>) -> Result<DenseFeatures<F>> {
        let mut tape = Tape::<F>::no_grad();
        let leaves = self.bind(&mut tape);
        let v = self.encode_image_dense_bound(&mut tape, &leaves, image)?;
        let grid = tape
            .value(v)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        Ok(DenseFeatures { grid, side: self.config.grid_side() })
    }

    /// Full inference path with the rejection bypass: `<REJ>` short-circuits
    /// to an empty output and never touches the decoders.
    pub fn ground(
        &self,
        image: &ndarray::Array3<f32>,
        grounding: GroundingToken,
        loc_embedding: &Array1<F>,
    ) -> Result<GroundingOutput<F>> {
        if grounding == GroundingToken::Rej {
            return Ok(GroundingOutput { mask_logits: None, bbox: None, rejected: true });
        }
        let mut tape = Tape::<F>::no_grad();
        let leaves = self.bind(&mut tape);
        let features = self.encode_image_dense_bound(&mut tape, &leaves, image)?;
        let emb = tape.constant(
            loc_embedding
                .clone()
                .into_shape_with_order(IxDyn(&[1, loc_embedding.len()]))
                .unwrap(),
        );
        let prompt = self.project_prompt_bound(&mut tape, &leaves, emb);
        let mask = self.decode_mask_bound(&mut tape, &leaves, features, prompt);
        let bbox = self.decode_bbox_bound(&mut tape, &leaves, features, prompt);

        let mask_logits = tape
            .value(mask)
            .view()
            .into_dimensionality::<Ix2>()
            .unwrap()
            .to_owned();
        let b = tape.value(bbox);
        let b1 = b.view().into_dimensionality::<Ix1>().unwrap();
        let bbox = BBox::new(to_f64(b1[0]), to_f64(b1[1]), to_f64(b1[2]), to_f64(b1[3]));
        Ok(GroundingOutput { mask_logits: Some(mask_logits), bbox: Some(bbox), rejected: false })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};

    fn cfg() -> GrounderConfig {
        GrounderConfig { image_size: 16, d_model: 12, d_ground: 8, enc_channels: (4, 6), mask_head_hidden: 6, bbox_hidden: 8, seed: 3 }
    }

    fn image(seed: u64, s: usize) -> Array3<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array3::from_shape_fn((3, s, s), |_| rng.random::<f32>())
    }

    #[test]
    fn zero_image_gives_finite_features_of_documented_shape() {
        let g = init_grounder::<f64>(&cfg()).unwrap();
        let img = Array3::<f32>::zeros((3, 16, 16));
        let f = g.encode_image_dense(&img).unwrap();
        assert_eq!(f.side, 2);
        assert_eq!(f.grid.dim(), (4, 8));
        assert!(f.grid.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn encoder_is_deterministic() {
        let g = init_grounder::<f64>(&cfg()).unwrap();
        let img = image(5, 16);
        let a = g.encode_image_dense(&img).unwrap();
        let b = g.encode_image_dense(&img).unwrap();
        assert_eq!(a.grid, b.grid);
    }

    #[test]
    fn encoder_shift_equivariance_by_one_cell() {
        // 64px image, full stride 8: translating an object 8px moves the
        // dominant feature response one cell.
        let config = GrounderConfig { image_size: 64, ..GrounderConfig::default() };
        let g = init_grounder::<f64>(&config).unwrap();
        let mut img_a = Array3::<f32>::zeros((3, 64, 64));
        let mut img_b = Array3::<f32>::zeros((3, 64, 64));
        for dy in 0..8 {
            for dx in 0..8 {
                for c in 0..3 {
                    img_a[(c, 24 + dy, 24 + dx)] = 1.0;
                    img_b[(c, 24 + dy, 32 + dx)] = 1.0; // shifted one patch right
                }
            }
        }
        let fa = g.encode_image_dense(&img_a).unwrap();
        let fb = g.encode_image_dense(&img_b).unwrap();
        let argmax = |f: &DenseFeatures<f64>| {
            let mut best = (0usize, f64::MIN);
            for r in 0..f.grid.nrows() {
                let norm: f64 = (0..f.grid.ncols()).map(|c| f.grid[(r, c)].powi(2)).sum();
                if norm > best.1 {
                    best = (r, norm);
                }
            }
            (best.0 / f.side, best.0 % f.side)
        };
        let (ya, xa) = argmax(&fa);
        let (yb, xb) = argmax(&fb);
        assert_eq!(ya, yb, "row must not move");
        assert_eq!(xb, xa + 1, "one-patch shift must move the response one cell");
    }

    #[test]
    fn projection_zero_input_zero_final_layer() {
        let mut g = init_grounder::<f64>(&cfg()).unwrap();
        g.params.value_mut(g.layout.proj2_w).fill(0.0);
        let mut tape = Tape::no_grad();
        let leaves = g.bind(&mut tape);
        let z = tape.constant(ArrayD::zeros(IxDyn(&[1, 12])));
        let p = g.project_prompt_bound(&mut tape, &leaves, z);
        assert!(tape.value(p).iter().all(|&v| v == 0.0));
        assert_eq!(tape.value(p).shape(), &[1, 8]);
    }

    #[test]
    fn mask_logits_shape_and_determinism() {
        let g = init_grounder::<f64>(&cfg()).unwrap();
        let img = image(9, 16);
        let emb = Array1::from_shape_fn(12, |i| i as f64 * 0.1 - 0.5);
        let a = g.ground(&img, GroundingToken::Loc, &emb).unwrap();
        let b = g.ground(&img, GroundingToken::Loc, &emb).unwrap();
        let (ma, mb) = (a.mask_logits.unwrap(), b.mask_logits.unwrap());
        assert_eq!(ma.dim(), (16, 16));
        assert_eq!(ma, mb);
        assert_eq!(a.bbox.unwrap(), b.bbox.unwrap());
    }

    #[test]
    fn handset_prompt_matches_dot_product_argmax_oracle() {
        // identity head: zero refinement, logits == affinity
        let mut g = init_grounder::<f64>(&cfg()).unwrap();
        g.params.value_mut(g.layout.mask2_w).fill(0.0);
        g.params.value_mut(g.layout.mask2_b).fill(0.0);

        // hand-built features: cell 3 has the largest norm
        let mut features = Array2::<f64>::zeros((4, 8));
        for r in 0..4 {
            for c in 0..8 {
                features[(r, c)] = ((r * 8 + c) % 5) as f64 * 0.1;
            }
        }
        for c in 0..8 {
            features[(3, c)] = 2.0 + c as f64 * 0.1;
        }
        let prompt = features.row(3).to_owned();

        // oracle: scaled dot products, brute force
        let oracle = g.mask_affinity(&features, &prompt);
        let mut best = (0usize, 0usize);
        for y in 0..2 {
            for x in 0..2 {
                if oracle[(y, x)] > oracle[best] {
                    best = (y, x);
                }
            }
        }
        assert_eq!(best, (1, 1), "cell 3 is (1,1) in the 2x2 grid");

        // decoder path: pre-upsample logits equal the affinity
        let mut tape = Tape::no_grad();
        let leaves = g.bind(&mut tape);
        let f = tape.constant(features.clone().into_dyn());
        let p = tape.constant(prompt.clone().into_shape_with_order(IxDyn(&[1, 8])).unwrap());
        let logits = g.decode_mask_bound(&mut tape, &leaves, f, p);
        // upsample of a 2x2 grid to 16x16 preserves the maximum cell corner
        let up = tape.value(logits).view().into_dimensionality::<Ix2>().unwrap().to_owned();
        let quad_mean = |y0: usize, x0: usize| {
            let mut s = 0.0;
            for y in y0..y0 + 8 {
                for x in x0..x0 + 8 {
                    s += up[(y, x)];
                }
            }
            s / 64.0
        };
        let quads = [quad_mean(0, 0), quad_mean(0, 8), quad_mean(8, 0), quad_mean(8, 8)];
        let max_quad = quads.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(quads[3], max_quad, "bottom-right quadrant must dominate");
    }

    #[test]
    fn bbox_invariants_hold_for_random_inputs() {
        let g = init_grounder::<f64>(&cfg()).unwrap();
        let img = image(21, 16);
        for k in 0..10 {
            let emb = Array1::from_shape_fn(12, |i| ((i + k) as f64 * 0.37).sin());
            let out = g.ground(&img, GroundingToken::Loc, &emb).unwrap();
            let b = out.bbox.unwrap();
            assert!(b.x1 <= b.x2 && b.y1 <= b.y2);
            for v in b.as_array() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn rejection_bypass_never_decodes_and_ignores_image() {
        let g = init_grounder::<f64>(&cfg()).unwrap();
        let emb = Array1::zeros(12);
        g.reset_decode_calls();
        let a = g.ground(&image(1, 16), GroundingToken::Rej, &emb).unwrap();
        let b = g.ground(&image(2, 16), GroundingToken::Rej, &emb).unwrap();
        assert_eq!(g.decode_call_count(), 0, "decoders must not run");
        assert!(a.rejected && b.rejected);
        assert!(a.mask_logits.is_none() && a.bbox.is_none());
        assert!(b.mask_logits.is_none() && b.bbox.is_none());

        g.ground(&image(1, 16), GroundingToken::Loc, &emb).unwrap();
        assert_eq!(g.decode_call_count(), 2, "mask and box decoders each once");
    }

    #[test]
    fn full_grounder_gradients_match_finite_differences() {
        let config = cfg();
        let grounder = init_grounder::<f64>(&config).unwrap();
        let img = image(33, 16);
        let gt_mask = ndarray::ArrayD::from_shape_fn(IxDyn(&[16, 16]), |ix| {
            if ix[0] >= 4 && ix[0] < 10 && ix[1] >= 6 && ix[1] < 12 { 1.0 } else { 0.0 }
        });
        let gt_mask = std::sync::Arc::new(gt_mask);
        let emb0 = ArrayD::from_shape_fn(IxDyn(&[1, 12]), |ix| (ix[1] as f64 * 0.3).cos());

        let n = grounder.params.len();
        let build = {
            let g = grounder.clone();
            let img = img.clone();
            let gt_mask = std::sync::Arc::clone(&gt_mask);
            move |tape: &mut Tape<f64>, vars: &[Var]| {
                let leaves = &vars[..n];
                let emb = vars[n];
                let features = g.encode_image_dense_bound(tape, leaves, &img).unwrap();
                let prompt = g.project_prompt_bound(tape, leaves, emb);
                let mask = g.decode_mask_bound(tape, leaves, features, prompt);
                let boxp = g.decode_bbox_bound(tape, leaves, features, prompt);
                let bce = tape.bce_with_logits_mean(mask, std::sync::Arc::clone(&gt_mask));
                let dice = tape.dice_loss(mask, std::sync::Arc::clone(&gt_mask), 1.0);
                let det = tape.detection_loss(boxp, [0.25, 0.3, 0.7, 0.8]);
                tape.affine_combination(&[(bce, 1.0), (dice, 1.0), (det, 1.0)])
            }
        };
        let mut inputs: Vec<ArrayD<f64>> =
            (0..n).map(|i| grounder.params.value(ParamId(i)).clone()).collect();
        inputs.push(emb0);

        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let probes: Vec<(usize, usize)> = (0..25)
            .map(|_| {
                let p = rng.random_range(0..inputs.len());
                let e = rng.random_range(0..inputs[p].len());
                (p, e)
            })
            .collect();
        let b: Box<gradcheck::BuildFn> = Box::new(build);
        let err = gradcheck::max_relative_error_sampled(&b, &inputs, &probes, 1e-5);
        assert!(err <= 1e-3, "grounder pipeline rel error {err:.2e}");
    }
}
