//! Loss terms and their composition: rejection and reasoning BCE, box
//! regression (smooth-L1 + GIoU complement), segmentation (BCE + Dice),
//! token cross entropy, and the weighted total.
//!
//! These are the reference (probability-space) definitions used for logging
//! and verification; training uses the tape equivalents in `tensor::ops`,
//! which the gradient tests tie back to these values.

use crate::error::{Error, Result};
use crate::grounder::BBox;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Probability clamp for the BCE terms.
pub const PROB_EPS: f64 = 1e-7;
/// Dice smoothing constant.
pub const DICE_EPS: f64 = 1.0;
/// Smooth-L1 transition point.
pub const SMOOTH_L1_BETA: f64 = 1.0;

/// Coefficients of the weighted loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rej: f64,
    pub lambda_reason: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_rej: 1.0, lambda_reason: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.lambda_rej < 0.0 || self.lambda_reason < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Per-step loss components; `det` folds GIoU as `1 - GIoU` so every field
/// is non-negative.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub rej: f64,
    pub reason: f64,
    pub det: f64,
    pub seg: f64,
    pub text: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// Checks `total = l1*rej + l2*reason + det + seg + text` to 1e-6.
    pub fn is_consistent(&self, weights: &LossWeights) -> bool {
        let recomposed = weights.lambda_rej * self.rej
            + weights.lambda_reason * self.reason
            + self.det
            + self.seg
            + self.text;
        (recomposed - self.total).abs() <= 1e-6
    }

    pub fn all_finite(&self) -> Option<&'static str> {
        for (name, v) in [
            ("rej", self.rej),
            ("reason", self.reason),
            ("det", self.det),
            ("seg", self.seg),
            ("text", self.text),
            ("total", self.total),
        ] {
            if !v.is_finite() {
                return Some(name);
            }
        }
        None
    }
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_EPS, 1.0 - PROB_EPS)
}

/// Mean binary cross entropy of rejection probabilities against 0/1 labels.
pub fn rejection_loss(p_rej: &[f64], y_rej: &[bool]) -> Result<f64> {
    binary_loss(p_rej, y_rej)
}

/// Mean binary cross entropy of reasoning probabilities against 0/1 labels.
pub fn reasoning_loss(p_rea: &[f64], y_rea: &[bool]) -> Result<f64> {
    binary_loss(p_rea, y_rea)
}

fn binary_loss(p: &[f64], y: &[bool]) -> Result<f64> {
    if p.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if p.len() != y.len() {
        return Err(Error::Shape(format!("{} probabilities vs {} labels", p.len(), y.len())));
    }
    let sum: f64 = p
        .iter()
        .zip(y.iter())
        .map(|(&pi, &yi)| {
            let pc = clamp_prob(pi);
            if yi {
                -pc.ln()
            } else {
                -(1.0 - pc).ln()
            }
        })
        .sum();
    Ok(sum / p.len() as f64)
}

/// Generalized IoU of two corner boxes.
pub fn giou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let ew = a.x2.max(b.x2) - a.x1.min(b.x1);
    let eh = a.y2.max(b.y2) - a.y1.min(b.y1);
    let enc = ew * eh;
    inter / union - (enc - union) / enc
}

fn smooth_l1(d: f64) -> f64 {
    if d.abs() < SMOOTH_L1_BETA {
        0.5 * d * d / SMOOTH_L1_BETA
    } else {
        d.abs() - 0.5 * SMOOTH_L1_BETA
    }
}

/// Box loss: coordinate-summed smooth-L1 plus `1 - GIoU`.
pub fn detection_loss(pred: &BBox, gt: &BBox) -> Result<f64> {
    if gt.area() <= 0.0 {
        return Err(Error::Config("degenerate zero-area ground-truth box".into()));
    }
    let smooth: f64 = pred
        .as_array()
        .iter()
        .zip(gt.as_array().iter())
        .map(|(&p, &g)| smooth_l1(p - g))
        .sum();
    Ok(smooth + 1.0 - giou(pred, gt))
}

/// Segmentation loss: mean pixel BCE-with-logits plus Dice complement.
pub fn segmentation_loss(pred_logits: &Array2<f64>, gt: &Array2<u8>) -> Result<f64> {
    if pred_logits.dim() != gt.dim() {
        return Err(Error::Shape(format!(
            "mask logits {:?} vs ground truth {:?}",
            pred_logits.dim(),
            gt.dim()
        )));
    }
    let n = pred_logits.len() as f64;
    let mut bce = 0.0;
    let mut inter = 0.0;
    let mut psum = 0.0;
    let mut gsum = 0.0;
    for (&z, &t) in pred_logits.iter().zip(gt.iter()) {
        let t = t as f64;
        bce += z.max(0.0) - z * t + (1.0 + (-z.abs()).exp()).ln();
        let p = 1.0 / (1.0 + (-z).exp());
        inter += p * t;
        psum += p;
        gsum += t;
    }
    let dice = 1.0 - (2.0 * inter + DICE_EPS) / (psum + gsum + DICE_EPS);
    Ok(bce / n + dice)
}

/// Mean token cross entropy over supervised positions.
pub fn lm_loss(logits: &Array2<f64>, targets: &[usize], supervised: &[bool]) -> Result<f64> {
    let n = logits.nrows();
    if targets.len() != n || supervised.len() != n {
        return Err(Error::Shape("logits/targets/mask length mismatch".into()));
    }
    let m = supervised.iter().filter(|&&s| s).count();
    if m == 0 {
        return Err(Error::EmptyBatch);
    }
    let mut total = 0.0;
    for r in 0..n {
        if !supervised[r] {
            continue;
        }
        let row = logits.row(r);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
        total += lse - row[targets[r]];
    }
    Ok(total / m as f64)
}

/// Per-sample ingredients for one batch entry.
#[derive(Debug, Clone, Default)]
pub struct SampleLosses {
    pub rej_prob: f64,
    pub rej_label: bool,
    pub rea_prob: f64,
    pub rea_label: bool,
    /// Present only for non-rejected samples.
    pub det: Option<f64>,
    pub seg: Option<f64>,
    pub text: f64,
}

/// Composes the weighted batch total. Rejected samples contribute zero to
/// the grounding terms; means are over the full batch.
pub fn total_loss(samples: &[SampleLosses], weights: &LossWeights) -> Result<LossBreakdown> {
    if samples.is_empty() {
        return Err(Error::EmptyBatch);
    }
    weights.validate()?;
    let n = samples.len() as f64;
    let rej = rejection_loss(
        &samples.iter().map(|s| s.rej_prob).collect::<Vec<_>>(),
        &samples.iter().map(|s| s.rej_label).collect::<Vec<_>>(),
    )?;
    let reason = reasoning_loss(
        &samples.iter().map(|s| s.rea_prob).collect::<Vec<_>>(),
        &samples.iter().map(|s| s.rea_label).collect::<Vec<_>>(),
    )?;
    let det = samples.iter().filter_map(|s| s.det).sum::<f64>() / n;
    let seg = samples.iter().filter_map(|s| s.seg).sum::<f64>() / n;
    let text = samples.iter().map(|s| s.text).sum::<f64>() / n;
    let total = weights.lambda_rej * rej + weights.lambda_reason * reason + det + seg + text;
    Ok(LossBreakdown { rej, reason, det, seg, text, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bce_analytic_values() {
        // perfect prediction
        let v = rejection_loss(&[1.0 - PROB_EPS], &[true]).unwrap();
        assert!(v.abs() < 1e-6);
        // coin flip
        let v = rejection_loss(&[0.5], &[true]).unwrap();
        assert!((v - std::f64::consts::LN_2).abs() < 1e-12);
        // clamped extreme stays finite and equals -ln(eps)
        let v = reasoning_loss(&[0.0], &[true]).unwrap();
        assert!((v - (-PROB_EPS.ln())).abs() < 1e-9);
        assert!(v.is_finite());
    }

    #[test]
    fn bce_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p: Vec<f64> = (0..64).map(|_| rng.random::<f64>()).collect();
        let y: Vec<bool> = (0..64).map(|_| rng.random::<bool>()).collect();
        let got = rejection_loss(&p, &y).unwrap();
        // oracle: naive per-sample loop over the textbook formula
        let mut acc = 0.0;
        for i in 0..p.len() {
            let pc = p[i].clamp(PROB_EPS, 1.0 - PROB_EPS);
            let yi = if y[i] { 1.0 } else { 0.0 };
            acc += -(yi * pc.ln() + (1.0 - yi) * (1.0 - pc).ln());
        }
        let expected = acc / p.len() as f64;
        assert!((got - expected).abs() < 1e-9);
    }

    #[test]
    fn empty_batch_is_an_error() {
        assert!(matches!(rejection_loss(&[], &[]), Err(Error::EmptyBatch)));
    }

    #[test]
    fn detection_identity_is_zero() {
        let b = BBox::new(0.2, 0.3, 0.6, 0.9);
        let v = detection_loss(&b, &b).unwrap();
        assert!(v.abs() < 1e-12);
        assert!((giou(&b, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_boxes_have_negative_giou() {
        let a = BBox::new(0.0, 0.0, 0.2, 0.2);
        let b = BBox::new(0.8, 0.8, 1.0, 1.0);
        assert!(giou(&a, &b) < 0.0);
    }

    #[test]
    fn giou_hand_case_minus_five_sixty_thirds() {
        // A=(0,0,2,2), B=(1,1,3,3) scaled by 1/3 into [0,1]
        let a = BBox::new(0.0, 0.0, 2.0 / 3.0, 2.0 / 3.0);
        let b = BBox::new(1.0 / 3.0, 1.0 / 3.0, 1.0, 1.0);
        let expected = 1.0 / 7.0 - 2.0 / 9.0; // = -5/63
        assert!((giou(&a, &b) - expected).abs() < 1e-12);
        assert!((expected + 5.0 / 63.0).abs() < 1e-15);
    }

    #[test]
    fn smooth_l1_quarter_offset_is_eighth() {
        // one coordinate off by 0.5 -> smooth-L1 term 0.125
        let pred = BBox::new(0.0, 0.0, 0.5, 1.0);
        let gt = BBox::new(0.0, 0.0, 1.0, 1.0);
        let total = detection_loss(&pred, &gt).unwrap();
        let g = giou(&pred, &gt);
        assert!(((total - (1.0 - g)) - 0.125).abs() < 1e-12);
    }

    #[test]
    fn degenerate_gt_box_rejected() {
        let pred = BBox::new(0.1, 0.1, 0.2, 0.2);
        let gt = BBox::new(0.5, 0.5, 0.5, 0.9);
        assert!(detection_loss(&pred, &gt).is_err());
    }

    #[test]
    fn segmentation_perfect_mask_is_near_zero() {
        let mut logits = Array2::<f64>::from_elem((8, 8), -30.0);
        let mut gt = Array2::<u8>::zeros((8, 8));
        for y in 2..5 {
            for x in 3..7 {
                logits[(y, x)] = 30.0;
                gt[(y, x)] = 1;
            }
        }
        let v = segmentation_loss(&logits, &gt).unwrap();
        assert!(v < 1e-3, "loss {v}");
    }

    #[test]
    fn segmentation_empty_gt_dice_identity() {
        // all-negative logits against an empty mask: dice term exactly 0
        let logits = Array2::<f64>::from_elem((6, 6), -40.0);
        let gt = Array2::<u8>::zeros((6, 6));
        let v = segmentation_loss(&logits, &gt).unwrap();
        // bce of -40 logits on 0-labels is ~0; dice = 1 - eps/eps = 0
        assert!(v < 1e-9, "loss {v}");
    }

    #[test]
    fn segmentation_matches_scalar_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = Array2::<f64>::from_shape_fn((8, 8), |_| rng.random::<f64>() * 6.0 - 3.0);
        let gt = Array2::<u8>::from_shape_fn((8, 8), |_| rng.random::<bool>() as u8);
        let got = segmentation_loss(&logits, &gt).unwrap();

        // oracle: sigmoid + textbook BCE and dice computed element by element
        let mut bce = 0.0;
        let mut inter = 0.0;
        let mut ps = 0.0;
        let mut gs = 0.0;
        for y in 0..8 {
            for x in 0..8 {
                let p = 1.0 / (1.0 + (-logits[(y, x)]).exp());
                let t = gt[(y, x)] as f64;
                let pc = p.clamp(1e-12, 1.0 - 1e-12);
                bce += -(t * pc.ln() + (1.0 - t) * (1.0 - pc).ln());
                inter += p * t;
                ps += p;
                gs += t;
            }
        }
        let expected = bce / 64.0 + (1.0 - (2.0 * inter + 1.0) / (ps + gs + 1.0));
        assert!((got - expected).abs() < 1e-9, "{got} vs {expected}");
    }

    #[test]
    fn lm_loss_analytic_values() {
        // one-hot-correct logits
        let mut logits = Array2::<f64>::from_elem((3, 5), -20.0);
        for (r, &t) in [1usize, 4, 2].iter().enumerate() {
            logits[(r, t)] = 20.0;
        }
        let v = lm_loss(&logits, &[1, 4, 2], &[true, true, true]).unwrap();
        assert!(v < 1e-9);

        // uniform logits -> ln V
        let logits = Array2::<f64>::zeros((4, 11));
        let v = lm_loss(&logits, &[0, 1, 2, 3], &[true; 4]).unwrap();
        assert!((v - (11f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn lm_loss_masked_positions_do_not_contribute() {
        let mut a = Array2::<f64>::zeros((3, 7));
        let mut b = a.clone();
        // perturb an unsupervised row only
        a[(1, 3)] = 5.0;
        b[(1, 3)] = -9.0;
        let mask = [true, false, true];
        let va = lm_loss(&a, &[0, 0, 0], &mask).unwrap();
        let vb = lm_loss(&b, &[0, 0, 0], &mask).unwrap();
        assert_eq!(va, vb);
        assert!(matches!(
            lm_loss(&a, &[0, 0, 0], &[false, false, false]),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn total_loss_composition() {
        let mk = |rejected: bool| SampleLosses {
            rej_prob: if rejected { 0.9 } else { 0.2 },
            rej_label: rejected,
            rea_prob: 0.3,
            rea_label: false,
            det: (!rejected).then_some(0.4),
            seg: (!rejected).then_some(0.6),
            text: 1.5,
        };
        // zero weights: total = det + seg + text
        let w0 = LossWeights { lambda_rej: 0.0, lambda_reason: 0.0 };
        let b = total_loss(&[mk(false), mk(true)], &w0).unwrap();
        assert!((b.total - (b.det + b.seg + b.text)).abs() < 1e-12);
        assert!(b.is_consistent(&w0));

        // all rejected: grounding terms vanish
        let w = LossWeights::default();
        let b = total_loss(&[mk(true), mk(true)], &w).unwrap();
        assert_eq!(b.det, 0.0);
        assert_eq!(b.seg, 0.0);
        assert!(b.is_consistent(&w));
    }

    #[test]
    fn total_loss_recomposition_on_random_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..50 {
            let n = rng.random_range(1..9);
            let samples: Vec<SampleLosses> = (0..n)
                .map(|_| {
                    let rejected = rng.random::<bool>();
                    SampleLosses {
                        rej_prob: rng.random(),
                        rej_label: rejected,
                        rea_prob: rng.random(),
                        rea_label: rng.random(),
                        det: (!rejected).then(|| rng.random::<f64>() * 2.0),
                        seg: (!rejected).then(|| rng.random::<f64>()),
                        text: rng.random::<f64>() * 3.0,
                    }
                })
                .collect();
            let w = LossWeights { lambda_rej: rng.random::<f64>() * 2.0, lambda_reason: rng.random() };
            let b = total_loss(&samples, &w).unwrap();
            assert!(b.is_consistent(&w));
            assert!(b.all_finite().is_none());
        }
    }

    proptest! {
        #[test]
        fn giou_range_and_symmetry(
            ax1 in 0.0f64..0.8, ay1 in 0.0f64..0.8,
            aw in 0.05f64..0.2, ah in 0.05f64..0.2,
            bx1 in 0.0f64..0.8, by1 in 0.0f64..0.8,
            bw in 0.05f64..0.2, bh in 0.05f64..0.2,
        ) {
            let a = BBox::new(ax1, ay1, ax1 + aw, ay1 + ah);
            let b = BBox::new(bx1, by1, bx1 + bw, by1 + bh);
            let g = giou(&a, &b);
            prop_assert!(g > -1.0 && g <= 1.0 + 1e-12);
            prop_assert!((g - giou(&b, &a)).abs() < 1e-12);
        }

        #[test]
        fn dice_range_and_pixel_permutation_invariance(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = Array2::<f64>::from_shape_fn((6, 6), |_| rng.random::<f64>() * 8.0 - 4.0);
            let gt = Array2::<u8>::from_shape_fn((6, 6), |_| rng.random::<bool>() as u8);
            let full = segmentation_loss(&logits, &gt).unwrap();
            prop_assert!(full.is_finite() && full >= 0.0);

            // permute pixels of both pred and gt identically
            let mut idx: Vec<usize> = (0..36).collect();
            for i in (1..36).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            let mut pl = Array2::<f64>::zeros((6, 6));
            let mut pg = Array2::<u8>::zeros((6, 6));
            for (k, &src) in idx.iter().enumerate() {
                pl[(k / 6, k % 6)] = logits[(src / 6, src % 6)];
                pg[(k / 6, k % 6)] = gt[(src / 6, src % 6)];
            }
            let permuted = segmentation_loss(&pl, &pg).unwrap();
            prop_assert!((full - permuted).abs() < 1e-12);
        }
    }
}
