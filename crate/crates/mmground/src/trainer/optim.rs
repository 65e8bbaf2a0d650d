//! AdamW and the warmup-then-linear-decay schedule.

use super::TrainConfig;
use crate::scalar::{fl, Scalar};
use ndarray::ArrayD;

/// Linear warmup from 0 to `peak_lr` over `warmup_steps`, then linear decay
/// to 0 at `total_steps`.
pub fn warmup_decay_lr(step: usize, config: &TrainConfig) -> f64 {
    debug_assert!(step <= config.total_steps);
    if step <= config.warmup_steps {
        config.peak_lr * step as f64 / config.warmup_steps as f64
    } else {
        let remain = (config.total_steps - step) as f64;
        let span = (config.total_steps - config.warmup_steps) as f64;
        config.peak_lr * remain / span
    }
}

/// AdamW with bias correction. The paper's constants: betas (0.9, 0.999),
/// eps 1e-8, zero weight decay.
pub struct AdamW<F: Scalar> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: usize,
    pub m: Vec<ArrayD<F>>,
    pub v: Vec<ArrayD<F>>,
}

impl<F: Scalar> AdamW<F> {
    pub fn new(shapes: &[&ArrayD<F>]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m: shapes.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect(),
            v: shapes.iter().map(|a| ArrayD::zeros(a.raw_dim())).collect(),
        }
    }

    /// One update over parallel slices of parameters and gradients.
    pub fn step<'p>(
        &mut self,
        params: impl Iterator<Item = &'p mut ArrayD<F>>,
        grads: &[ArrayD<F>],
        lr: f64,
    ) where
        F: 'p,
    {
        self.t += 1;
        let b1: F = fl(self.beta1);
        let b2: F = fl(self.beta2);
        let one: F = F::one();
        let epsf: F = fl(self.eps);
        let lrf: F = fl(lr);
        let wd: F = fl(self.weight_decay);
        let bc1: F = fl(1.0 - self.beta1.powi(self.t as i32));
        let bc2: F = fl(1.0 - self.beta2.powi(self.t as i32));

        for (i, p) in params.enumerate() {
            let g = &grads[i];
            debug_assert_eq!(p.shape(), g.shape(), "gradient shape mismatch at {i}");
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            ndarray::Zip::from(&mut *m).and(g).for_each(|mi, &gi| {
                *mi = b1 * *mi + (one - b1) * gi;
            });
            ndarray::Zip::from(&mut *v).and(g).for_each(|vi, &gi| {
                *vi = b2 * *vi + (one - b2) * gi * gi;
            });
            ndarray::Zip::from(p).and(&*m).and(&*v).for_each(|pi, &mi, &vi| {
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                *pi = *pi - lrf * (mhat / (vhat.sqrt() + epsf) + wd * *pi);
            });
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
pub fn clip_global_norm<F: Scalar>(grads: &mut [ArrayD<F>], max_norm: f64) {
    let mut sq = 0.0f64;
    for g in grads.iter() {
        for &x in g.iter() {
            let xf = x.to_f64().unwrap_or(0.0);
            sq += xf * xf;
        }
    }
    let norm = sq.sqrt();
    if norm > max_norm && norm > 0.0 {
        let scale: F = fl(max_norm / norm);
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * scale);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;

    #[test]
    fn schedule_hits_documented_points() {
        let c = TrainConfig { peak_lr: 3e-4, warmup_steps: 100, total_steps: 2000, ..TrainConfig::default() };
        assert!((warmup_decay_lr(100, &c) - 3e-4).abs() < 1e-18);
        assert!((warmup_decay_lr(50, &c) - 1.5e-4).abs() < 1e-18);
        assert_eq!(warmup_decay_lr(2000, &c), 0.0);
        assert_eq!(warmup_decay_lr(0, &c), 0.0);
        // midpoint of decay: (2000-1050)/(2000-100) = 0.5
        assert!((warmup_decay_lr(1050, &c) - 1.5e-4).abs() < 1e-18);
    }

    #[test]
    fn adamw_first_step_moves_by_lr_against_gradient_sign() {
        let mut p = ArrayD::<f64>::from_elem(IxDyn(&[3]), 1.0);
        let g = ArrayD::<f64>::from_shape_vec(IxDyn(&[3]), vec![0.5, -0.25, 0.0]).unwrap();
        let mut opt = AdamW::new(&[&p]);
        opt.step([&mut p].into_iter(), &[g], 0.1);
        // with bias correction, |update| = lr for any nonzero gradient
        assert!((p[[0]] - (1.0 - 0.1)).abs() < 1e-6);
        assert!((p[[1]] - (1.0 + 0.1)).abs() < 1e-6);
        assert!((p[[2]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn clipping_preserves_direction() {
        let mut grads = vec![ArrayD::<f64>::from_elem(IxDyn(&[4]), 3.0)];
        clip_global_norm(&mut grads, 1.0);
        let norm: f64 = grads[0].iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
        let mut small = vec![ArrayD::<f64>::from_elem(IxDyn(&[4]), 0.01)];
        let before = small[0].clone();
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0], before);
    }
}
