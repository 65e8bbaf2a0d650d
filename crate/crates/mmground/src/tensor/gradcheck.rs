//! Central finite-difference verification of tape gradients.
//!
//! These helpers are the independent oracle side of every gradient test in
//! the crate: they only ever evaluate forward passes, so they cannot share a
//! bug with the backward closures they check.

use super::{Tape, Var};
use ndarray::ArrayD;
use std::sync::Arc;

/// Builds a fresh scalar-rooted graph from owned inputs. Inputs are
/// registered as leaves in order; the returned `Var` must be scalar-shaped.
pub type BuildFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Var;

/// Evaluates the scalar function defined by `build` at `inputs`.
pub fn eval(build: &BuildFn, inputs: &[ArrayD<f64>]) -> f64 {
    let mut tape = Tape::<f64>::no_grad();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(Arc::new(x.clone())))
        .collect();
    let root = build(&mut tape, &vars);
    tape.scalar_value(root)
}

/// Central finite difference of `build` w.r.t. every entry of every input.
pub fn numeric_gradients(build: &BuildFn, inputs: &[ArrayD<f64>], eps: f64) -> Vec<ArrayD<f64>> {
    let mut grads = Vec::with_capacity(inputs.len());
    for (i, input) in inputs.iter().enumerate() {
        let mut grad = ArrayD::zeros(input.raw_dim());
        for idx in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].as_slice_mut().unwrap()[idx] += eps;
            let mut minus = inputs.to_vec();
            minus[i].as_slice_mut().unwrap()[idx] -= eps;
            grad.as_slice_mut().unwrap()[idx] =
                (eval(build, &plus) - eval(build, &minus)) / (2.0 * eps);
        }
        grads.push(grad);
    }
    grads
}

/// Analytic gradients via the tape.
pub fn analytic_gradients(build: &BuildFn, inputs: &[ArrayD<f64>]) -> Vec<ArrayD<f64>> {
    let mut tape = Tape::<f64>::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|x| tape.leaf(Arc::new(x.clone())))
        .collect();
    let root = build(&mut tape, &vars);
    let mut store = tape.backward(root);
    vars.iter()
        .zip(inputs.iter())
        .map(|(&v, x)| store.take(v).unwrap_or_else(|| ArrayD::zeros(x.raw_dim())))
        .collect()
}

/// Relative error with a floor so near-zero gradients compare sanely.
pub fn relative_error(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error between analytic and central-difference gradients.
pub fn max_relative_error(build: &BuildFn, inputs: &[ArrayD<f64>], eps: f64) -> f64 {
    let analytic = analytic_gradients(build, inputs);
    let numeric = numeric_gradients(build, inputs, eps);
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        for (&ai, &ni) in a.iter().zip(n.iter()) {
            worst = worst.max(relative_error(ai, ni));
        }
    }
    worst
}

/// Same check restricted to a sample of entries of a single input; avoids
/// quadratic cost when the input is an entire parameter set.
pub fn max_relative_error_sampled(
    build: &BuildFn,
    inputs: &[ArrayD<f64>],
    probes: &[(usize, usize)],
    eps: f64,
) -> f64 {
    let analytic = analytic_gradients(build, inputs);
    let mut worst = 0.0f64;
    for &(which, idx) in probes {
        let mut plus = inputs.to_vec();
        plus[which].as_slice_mut().unwrap()[idx] += eps;
        let mut minus = inputs.to_vec();
        minus[which].as_slice_mut().unwrap()[idx] -= eps;
        let numeric = (eval(build, &plus) - eval(build, &minus)) / (2.0 * eps);
        let a = analytic[which].as_slice().unwrap()[idx];
        worst = worst.max(relative_error(a, numeric));
    }
    worst
}
