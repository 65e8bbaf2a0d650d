//! Finite-difference verification of every op's backward closure.

use super::gradcheck::{max_relative_error, BuildFn};
use super::{Tape, Var};
use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::sync::Arc;

const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        // Box-Muller keeps this independent of rand_distr
        let u1: f64 = rng.random::<f64>().max(1e-12);
        let u2: f64 = rng.random::<f64>();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    })
}

fn scalarize(tape: &mut Tape<f64>, v: Var, rng: &mut ChaCha8Rng) -> Var {
    let shape = tape.value(v).shape().to_vec();
    let w = randn(rng, &shape);
    tape.weighted_sum(v, w)
}

/// Checks the op under a random linear functional so transposed/mis-routed
/// gradients cannot cancel.
fn check(build: impl Fn(&mut Tape<f64>, &[Var]) -> Var + 'static, inputs: &[ArrayD<f64>], tol: f64) {
    let b: Box<BuildFn> = Box::new(build);
    let err = max_relative_error(&b, inputs, EPS);
    assert!(err <= tol, "max relative error {err:.3e} > {tol:.1e}");
}

#[test]
fn grad_add_scale() {
    let mut r = rng(1);
    let x = randn(&mut r, &[3, 4]);
    let y = randn(&mut r, &[3, 4]);
    let wrng = rng(100);
    check(
        move |t, v| {
            let s = t.add(v[0], v[1]);
            let s = t.scale(s, 1.7);
            scalarize(t, s, &mut wrng.clone())
        },
        &[x, y],
        TOL,
    );
}

#[test]
fn grad_linear() {
    let mut r = rng(2);
    let x = randn(&mut r, &[5, 3]);
    let w = randn(&mut r, &[3, 4]);
    let b = randn(&mut r, &[4]);
    let wrng = rng(101);
    check(
        move |t, v| {
            let y = t.linear(v[0], v[1], v[2]);
            scalarize(t, y, &mut wrng.clone())
        },
        &[x, w, b],
        TOL,
    );
}

#[test]
fn grad_matmul() {
    let mut r = rng(3);
    let a = randn(&mut r, &[4, 3]);
    let b = randn(&mut r, &[3, 5]);
    let wrng = rng(102);
    check(
        move |t, v| {
            let y = t.matmul(v[0], v[1]);
            scalarize(t, y, &mut wrng.clone())
        },
        &[a, b],
        TOL,
    );
}

#[test]
fn grad_embedding() {
    let mut r = rng(4);
    let table = randn(&mut r, &[7, 4]);
    let wrng = rng(103);
    check(
        move |t, v| {
            let y = t.embedding(v[0], &[1, 3, 3, 0, 6]);
            scalarize(t, y, &mut wrng.clone())
        },
        &[table],
        TOL,
    );
}

#[test]
fn grad_layer_norm() {
    let mut r = rng(5);
    let x = randn(&mut r, &[4, 6]);
    let g = randn(&mut r, &[6]).mapv(|v| v + 2.0);
    let b = randn(&mut r, &[6]);
    let wrng = rng(104);
    check(
        move |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2], 1e-5);
            scalarize(t, y, &mut wrng.clone())
        },
        &[x, g, b],
        1e-5,
    );
}

#[test]
fn grad_gelu_sigmoid() {
    let mut r = rng(6);
    let x = randn(&mut r, &[3, 5]);
    let wrng = rng(105);
    check(
        move |t, v| {
            let y = t.gelu(v[0]);
            let y = t.sigmoid(y);
            scalarize(t, y, &mut wrng.clone())
        },
        &[x],
        TOL,
    );
}

#[test]
fn grad_mha_self_attention_causal() {
    let mut r = rng(7);
    let n = 5;
    let d = 8;
    let q = randn(&mut r, &[n, d]);
    let k = randn(&mut r, &[n, d]);
    let v = randn(&mut r, &[n, d]);
    let mut mask = Array2::<bool>::from_elem((n, n), false);
    for i in 0..n {
        for j in 0..=i {
            mask[(i, j)] = true;
        }
    }
    let mask = Arc::new(mask);
    let wrng = rng(106);
    check(
        move |t, vars| {
            let (y, _) = t.mha(vars[0], vars[1], vars[2], 2, Some(Arc::clone(&mask)));
            scalarize(t, y, &mut wrng.clone())
        },
        &[q, k, v],
        1e-5,
    );
}

#[test]
fn grad_mha_cross_shared_kv() {
    let mut r = rng(8);
    let q = randn(&mut r, &[1, 6]);
    let kv = randn(&mut r, &[9, 6]);
    let wrng = rng(107);
    check(
        move |t, vars| {
            let (y, _) = t.mha(vars[0], vars[1], vars[1], 1, None);
            scalarize(t, y, &mut wrng.clone())
        },
        &[q, kv],
        1e-5,
    );
}

#[test]
fn grad_concat_slice_reshape() {
    let mut r = rng(9);
    let a = randn(&mut r, &[3, 4]);
    let b = randn(&mut r, &[2, 4]);
    let wrng = rng(108);
    check(
        move |t, v| {
            let c = t.concat_rows(v[0], v[1]);
            let c = t.slice_rows(c, 1, 3);
            let c = t.reshape(c, &[4, 3]);
            let d = t.concat_cols(c, c);
            scalarize(t, d, &mut wrng.clone())
        },
        &[a, b],
        TOL,
    );
}

#[test]
fn grad_mul_row_broadcast() {
    let mut r = rng(10);
    let x = randn(&mut r, &[4, 5]);
    let v = randn(&mut r, &[5]);
    let wrng = rng(109);
    check(
        move |t, vars| {
            let y = t.mul_row_broadcast(vars[0], vars[1]);
            scalarize(t, y, &mut wrng.clone())
        },
        &[x, v],
        TOL,
    );
}

#[test]
fn grad_conv2d() {
    let mut r = rng(11);
    let x = randn(&mut r, &[2, 8, 8]);
    let w = randn(&mut r, &[3, 2, 3, 3]);
    let b = randn(&mut r, &[3]);
    let wrng = rng(110);
    check(
        move |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1);
            scalarize(t, y, &mut wrng.clone())
        },
        &[x, w, b],
        1e-5,
    );
}

#[test]
fn grad_bilinear_upsample() {
    let mut r = rng(12);
    let x = randn(&mut r, &[4, 4]);
    let wrng = rng(111);
    check(
        move |t, v| {
            let y = t.bilinear_upsample(v[0], 9, 9);
            scalarize(t, y, &mut wrng.clone())
        },
        &[x],
        TOL,
    );
}

#[test]
fn grad_reductions() {
    let mut r = rng(13);
    let x = randn(&mut r, &[3, 3]);
    check(
        move |t, v| {
            let a = t.sum_all(v[0]);
            let b = t.mean_all(v[0]);
            t.affine_combination(&[(a, 0.3), (b, -1.2)])
        },
        &[x],
        TOL,
    );
}

#[test]
fn grad_lm_cross_entropy() {
    let mut r = rng(14);
    let logits = randn(&mut r, &[5, 7]);
    check(
        move |t, v| t.lm_cross_entropy(v[0], &[2, 0, 6, 1, 3], &[true, false, true, true, false]),
        &[logits],
        1e-5,
    );
}

#[test]
fn grad_bce_with_logits_and_dice() {
    let mut r = rng(15);
    let logits = randn(&mut r, &[6, 6]);
    let gt = Arc::new(ArrayD::from_shape_fn(IxDyn(&[6, 6]), |ix| {
        if (ix[0] + ix[1]) % 3 == 0 { 1.0 } else { 0.0 }
    }));
    let gt2 = Arc::clone(&gt);
    check(
        move |t, v| {
            let a = t.bce_with_logits_mean(v[0], Arc::clone(&gt));
            let b = t.dice_loss(v[0], Arc::clone(&gt2), 1.0);
            t.affine_combination(&[(a, 1.0), (b, 1.0)])
        },
        &[logits],
        1e-5,
    );
}

#[test]
fn grad_bce_sigmoid_diff() {
    for (z0, z1, y) in [(0.3, -0.8, 1.0), (-1.2, 0.4, 0.0), (2.0, 1.0, 1.0)] {
        let pair = ArrayD::from_shape_vec(IxDyn(&[2]), vec![z0, z1]).unwrap();
        check(move |t, v| t.bce_sigmoid_diff(v[0], y, 1e-7), &[pair], 1e-6);
    }
}

#[test]
fn grad_sigmoid_sorted_box_and_detection() {
    let mut r = rng(16);
    for _ in 0..5 {
        let raw = randn(&mut r, &[4]);
        let gt = [0.2, 0.3, 0.7, 0.8];
        check(
            move |t, v| {
                let boxed = t.sigmoid_sorted_box(v[0]);
                t.detection_loss(boxed, gt)
            },
            &[raw],
            1e-5,
        );
    }
}

#[test]
fn grad_detection_loss_disjoint_boxes() {
    // disjoint case exercises the enclosing-box branch of GIoU
    let boxv = ArrayD::from_shape_vec(IxDyn(&[4]), vec![0.05, 0.05, 0.2, 0.2]).unwrap();
    check(move |t, v| t.detection_loss(v[0], [0.7, 0.7, 0.95, 0.95]), &[boxv], 1e-6);
}

#[test]
fn backward_accumulates_shared_operands() {
    // y = x + x must give dy/dx = 2
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Arc::new(ArrayD::from_elem(IxDyn(&[2]), 3.0)));
    let y = tape.add(x, x);
    let s = tape.sum_all(y);
    let mut store = tape.backward(s);
    let gx = store.take(x).unwrap();
    assert!(gx.iter().all(|&g| (g - 2.0).abs() < 1e-12));
}

#[test]
fn no_grad_tape_skips_closures() {
    let mut tape = Tape::<f64>::no_grad();
    let x = tape.constant(ArrayD::from_elem(IxDyn(&[2, 2]), 1.5));
    let y = tape.gelu(x);
    assert_eq!(tape.value(y).len(), 4);
}

#[test]
fn attention_rows_are_distributions() {
    let mut r = rng(17);
    let mut tape = Tape::<f64>::new();
    let q = tape.constant(randn(&mut r, &[4, 8]));
    let k = tape.constant(randn(&mut r, &[4, 8]));
    let v = tape.constant(randn(&mut r, &[4, 8]));
    let mut mask = Array2::<bool>::from_elem((4, 4), false);
    for i in 0..4 {
        for j in 0..=i {
            mask[(i, j)] = true;
        }
    }
    let (_, probs) = tape.mha(q, k, v, 2, Some(Arc::new(mask)));
    for h in 0..2 {
        for i in 0..4 {
            let row_sum: f64 = (0..4).map(|j| probs.0[(h, i, j)]).sum();
            assert!((row_sum - 1.0).abs() < 1e-9);
            for j in (i + 1)..4 {
                assert_eq!(probs.0[(h, i, j)], 0.0, "causal mask leak at ({i},{j})");
            }
        }
    }
}
