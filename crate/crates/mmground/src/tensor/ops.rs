//! Differentiable operations. Each op computes its value eagerly and pushes a
//! backward closure. Shape errors here are programmer errors and panic.

use super::{Tape, Var};
use crate::scalar::{fl, Scalar};
use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView2, Axis, Ix1, Ix2, Ix3, IxDyn};
use std::sync::Arc;

/// Per-head attention weights saved by [`Tape::mha`], used by probes.
#[derive(Clone)]
pub struct AttentionProbs<F: Scalar>(pub Arc<Array3<F>>);

fn as2<F: Scalar>(a: &ArrayD<F>) -> ArrayView2<'_, F> {
    a.view()
        .into_dimensionality::<Ix2>()
        .expect("expected rank-2 tensor")
}

fn dyn2<F: Scalar>(a: Array2<F>) -> ArrayD<F> {
    a.into_dyn()
}

fn scalar_arr<F: Scalar>(x: F) -> ArrayD<F> {
    ArrayD::from_elem(IxDyn(&[1]), x)
}

impl<F: Scalar> Tape<F> {
    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        assert_eq!(va.shape(), vb.shape(), "add shape mismatch");
        let out = &*va + &*vb;
        self.push(
            Arc::new(out),
            Some(Box::new(move |g, store| {
                store.accum(a.0, g.clone());
                store.accum(b.0, g.clone());
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let va = self.value_arc(a);
        let cf: F = fl(c);
        let out = va.mapv(|x| x * cf);
        self.push(
            Arc::new(out),
            Some(Box::new(move |g, store| {
                store.accum(a.0, g.mapv(|x| x * cf));
            })),
        )
    }

    /// `x (n,i) @ w (i,o) + b (o)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (vx, vw, vb) = (self.value_arc(x), self.value_arc(w), self.value_arc(b));
        let (x2, w2) = (as2(&vx), as2(&vw));
        let b1 = vb.view().into_dimensionality::<Ix1>().expect("bias rank 1");
        assert_eq!(x2.ncols(), w2.nrows(), "linear inner dim mismatch");
        assert_eq!(w2.ncols(), b1.len(), "linear bias dim mismatch");
        let mut out = x2.dot(&w2);
        out += &b1;
        self.push(
            Arc::new(dyn2(out)),
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                let (x2, w2) = (as2(&vx), as2(&vw));
                store.accum(x.0, dyn2(g2.dot(&w2.t())));
                store.accum(w.0, dyn2(x2.t().dot(&g2)));
                store.accum(b.0, g2.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// Plain 2-D matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        let out = as2(&va).dot(&as2(&vb));
        self.push(
            Arc::new(dyn2(out)),
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                store.accum(a.0, dyn2(g2.dot(&as2(&vb).t())));
                store.accum(b.0, dyn2(as2(&va).t().dot(&g2)));
            })),
        )
    }

    /// Gathers `ids` rows of `table (V,d)` into `(n,d)`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Var {
        let vt = self.value_arc(table);
        let t2 = as2(&vt);
        let d = t2.ncols();
        let mut out = Array2::<F>::zeros((ids.len(), d));
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).assign(&t2.row(id));
        }
        let ids_owned: Vec<usize> = ids.to_vec();
        let table_shape = (t2.nrows(), d);
        self.push(
            Arc::new(dyn2(out)),
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                let mut dt = Array2::<F>::zeros(table_shape);
                for (r, &id) in ids_owned.iter().enumerate() {
                    let mut row = dt.row_mut(id);
                    row += &g2.row(r);
                }
                store.accum(table.0, dyn2(dt));
            })),
        )
    }

    /// Row-wise layer normalization with affine gain/bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let (vx, vg, vb) = (self.value_arc(x), self.value_arc(gain), self.value_arc(bias));
        let x2 = as2(&vx);
        let g1 = vg.view().into_dimensionality::<Ix1>().unwrap();
        let b1 = vb.view().into_dimensionality::<Ix1>().unwrap();
        let (n, d) = (x2.nrows(), x2.ncols());
        let epsf: F = fl(eps);
        let inv_d: F = fl(1.0 / d as f64);
        let mut xhat = Array2::<F>::zeros((n, d));
        let mut rstd = Array1::<F>::zeros(n);
        for r in 0..n {
            let row = x2.row(r);
            let mu = row.sum() * inv_d;
            let mut var = F::zero();
            for &v in row {
                let c = v - mu;
                var = var + c * c;
            }
            var = var * inv_d;
            let rs = (var + epsf).sqrt().recip();
            rstd[r] = rs;
            for c in 0..d {
                xhat[(r, c)] = (row[c] - mu) * rs;
            }
        }
        let mut out = Array2::<F>::zeros((n, d));
        for r in 0..n {
            for c in 0..d {
                out[(r, c)] = xhat[(r, c)] * g1[c] + b1[c];
            }
        }
        let xhat = Arc::new(xhat);
        let xhat_b = Arc::clone(&xhat);
        self.push(
            Arc::new(dyn2(out)),
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                let g1 = vg.view().into_dimensionality::<Ix1>().unwrap();
                let (n, d) = (g2.nrows(), g2.ncols());
                let inv_d: F = fl(1.0 / d as f64);
                let mut dx = Array2::<F>::zeros((n, d));
                let mut dgain = Array1::<F>::zeros(d);
                let mut dbias = Array1::<F>::zeros(d);
                for r in 0..n {
                    let mut mean_dxhat = F::zero();
                    let mut mean_dxhat_xhat = F::zero();
                    for c in 0..d {
                        let dxh = g2[(r, c)] * g1[c];
                        mean_dxhat = mean_dxhat + dxh;
                        mean_dxhat_xhat = mean_dxhat_xhat + dxh * xhat_b[(r, c)];
                        dgain[c] = dgain[c] + g2[(r, c)] * xhat_b[(r, c)];
                        dbias[c] = dbias[c] + g2[(r, c)];
                    }
                    mean_dxhat = mean_dxhat * inv_d;
                    mean_dxhat_xhat = mean_dxhat_xhat * inv_d;
                    for c in 0..d {
                        let dxh = g2[(r, c)] * g1[c];
                        dx[(r, c)] =
                            rstd[r] * (dxh - mean_dxhat - xhat_b[(r, c)] * mean_dxhat_xhat);
                    }
                }
                store.accum(x.0, dyn2(dx));
                store.accum(gain.0, dgain.into_dyn());
                store.accum(bias.0, dbias.into_dyn());
            })),
        )
    }

    /// GELU, tanh approximation (smooth everywhere, which keeps
    /// finite-difference checks clean).
    pub fn gelu(&mut self, x: Var) -> Var {
        let vx = self.value_arc(x);
        let c: F = fl(0.7978845608028654); // sqrt(2/pi)
        let a: F = fl(0.044715);
        let half: F = fl(0.5);
        let out = vx.mapv(|v| {
            let u = c * (v + a * v * v * v);
            half * v * (F::one() + u.tanh())
        });
        self.push(
            Arc::new(out),
            Some(Box::new(move |g, store| {
                let three: F = fl(3.0);
                let mut dx = vx.as_ref().clone();
                dx.zip_mut_with(g, |v, &gi| {
                    let u = c * (*v + a * *v * *v * *v);
                    let t = u.tanh();
                    let sech2 = F::one() - t * t;
                    let du = c * (F::one() + three * a * *v * *v);
                    *v = gi * (half * (F::one() + t) + half * *v * sech2 * du);
                });
                store.accum(x.0, dx);
            })),
        )
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let vx = self.value_arc(x);
        let out = vx.mapv(sigmoid_scalar);
        let out = Arc::new(out);
        let saved = Arc::clone(&out);
        self.push(
            out,
            Some(Box::new(move |g, store| {
                let mut dx = saved.as_ref().clone();
                dx.zip_mut_with(g, |p, &gi| *p = gi * *p * (F::one() - *p));
                store.accum(x.0, dx);
            })),
        )
    }

    /// Multi-head scaled-dot-product attention, optionally cross-shaped.
    /// `q (nq,d)`, `k (nk,d)`, `v (nk,dv)`; `dv` may differ from `d` and the
    /// output is `(nq,dv)`. `allowed`, when present, is an `(nq,nk)` mask
    /// where `false` blocks attention. Returns the output and the per-head
    /// attention weights `(heads,nq,nk)`.
    pub fn mha(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        allowed: Option<Arc<Array2<bool>>>,
    ) -> (Var, AttentionProbs<F>) {
        let (vq, vk, vv) = (self.value_arc(q), self.value_arc(k), self.value_arc(v));
        let (q2, k2, v2) = (as2(&vq), as2(&vk), as2(&vv));
        let d = q2.ncols();
        let dv = v2.ncols();
        assert_eq!(d % n_heads, 0, "head count must divide query dim");
        assert_eq!(dv % n_heads, 0, "head count must divide value dim");
        assert_eq!(k2.ncols(), d);
        assert_eq!(k2.nrows(), v2.nrows());
        let (nq, nk, dh, dvh) = (q2.nrows(), k2.nrows(), d / n_heads, dv / n_heads);
        if let Some(m) = &allowed {
            assert_eq!(m.dim(), (nq, nk), "attention mask shape");
        }
        let alpha: F = fl(1.0 / (dh as f64).sqrt());

        let mut probs = Array3::<F>::zeros((n_heads, nq, nk));
        let mut out = Array2::<F>::zeros((nq, dv));
        for h in 0..n_heads {
            let cols = h * dh..(h + 1) * dh;
            let vcols = h * dvh..(h + 1) * dvh;
            let qh = q2.slice(s![.., cols.clone()]);
            let kh = k2.slice(s![.., cols]);
            let vh = v2.slice(s![.., vcols.clone()]);
            let mut scores = qh.dot(&kh.t());
            scores.mapv_inplace(|x| x * alpha);
            for r in 0..nq {
                let mut max = F::neg_infinity();
                for c in 0..nk {
                    let ok = allowed.as_ref().map_or(true, |m| m[(r, c)]);
                    if ok && scores[(r, c)] > max {
                        max = scores[(r, c)];
                    }
                }
                let mut denom = F::zero();
                for c in 0..nk {
                    let ok = allowed.as_ref().map_or(true, |m| m[(r, c)]);
                    let e = if ok { (scores[(r, c)] - max).exp() } else { F::zero() };
                    probs[(h, r, c)] = e;
                    denom = denom + e;
                }
                for c in 0..nk {
                    probs[(h, r, c)] = probs[(h, r, c)] / denom;
                }
            }
            let ah = probs.index_axis(Axis(0), h);
            let oh = ah.dot(&vh);
            out.slice_mut(s![.., vcols]).assign(&oh);
        }
        let probs = Arc::new(probs);
        let probs_b = Arc::clone(&probs);
        let out = self.push(
            Arc::new(dyn2(out)),
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                let (q2, k2, v2) = (as2(&vq), as2(&vk), as2(&vv));
                let mut dq = Array2::<F>::zeros((nq, d));
                let mut dk = Array2::<F>::zeros((nk, d));
                let mut dv_grad = Array2::<F>::zeros((nk, dv));
                for h in 0..n_heads {
                    let cols = h * dh..(h + 1) * dh;
                    let vcols = h * dvh..(h + 1) * dvh;
                    let qh = q2.slice(s![.., cols.clone()]);
                    let kh = k2.slice(s![.., cols.clone()]);
                    let vh = v2.slice(s![.., vcols.clone()]);
                    let gh = g2.slice(s![.., vcols.clone()]);
                    let ah = probs_b.index_axis(Axis(0), h);
                    // dA = gh vh^T ; dS = A o (dA - rowsum(dA o A))
                    let da = gh.dot(&vh.t());
                    let mut ds = Array2::<F>::zeros((nq, nk));
                    for r in 0..nq {
                        let mut dot = F::zero();
                        for c in 0..nk {
                            dot = dot + da[(r, c)] * ah[(r, c)];
                        }
                        for c in 0..nk {
                            ds[(r, c)] = ah[(r, c)] * (da[(r, c)] - dot) * alpha;
                        }
                    }
                    dv_grad.slice_mut(s![.., vcols]).assign(&ah.t().dot(&gh));
                    dq.slice_mut(s![.., cols.clone()]).assign(&ds.dot(&kh));
                    dk.slice_mut(s![.., cols]).assign(&ds.t().dot(&qh));
                }
                store.accum(q.0, dyn2(dq));
                store.accum(k.0, dyn2(dk));
                store.accum(v.0, dyn2(dv_grad));
            })),
        );
        (out, AttentionProbs(probs))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        let (a2, b2) = (as2(&va), as2(&vb));
        assert_eq!(a2.ncols(), b2.ncols(), "concat_rows column mismatch");
        let na = a2.nrows();
        let mut out = Array2::<F>::zeros((na + b2.nrows(), a2.ncols()));
        out.slice_mut(s![..na, ..]).assign(&a2);
        out.slice_mut(s![na.., ..]).assign(&b2);
        self.push(
            Arc::new(dyn2(out)),
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                store.accum(a.0, dyn2(g2.slice(s![..na, ..]).to_owned()));
                store.accum(b.0, dyn2(g2.slice(s![na.., ..]).to_owned()));
            })),
        )
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value_arc(a), self.value_arc(b));
        let (a2, b2) = (as2(&va), as2(&vb));
        assert_eq!(a2.nrows(), b2.nrows(), "concat_cols row mismatch");
        let ca = a2.ncols();
        let mut out = Array2::<F>::zeros((a2.nrows(), ca + b2.ncols()));
        out.slice_mut(s![.., ..ca]).assign(&a2);
        out.slice_mut(s![.., ca..]).assign(&b2);
        self.push(
            Arc::new(dyn2(out)),
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                store.accum(a.0, dyn2(g2.slice(s![.., ..ca]).to_owned()));
                store.accum(b.0, dyn2(g2.slice(s![.., ca..]).to_owned()));
            })),
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let vx = self.value_arc(x);
        let x2 = as2(&vx);
        let (n, d) = (x2.nrows(), x2.ncols());
        assert!(start + len <= n, "slice_rows out of range");
        let out = x2.slice(s![start..start + len, ..]).to_owned();
        self.push(
            Arc::new(dyn2(out)),
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                let mut dx = Array2::<F>::zeros((n, d));
                dx.slice_mut(s![start..start + len, ..]).assign(&g2);
                store.accum(x.0, dyn2(dx));
            })),
        )
    }

    /// `y[i,j] = x[i,j] * v[j]` with `v` a rank-1 var.
    pub fn mul_row_broadcast(&mut self, x: Var, v: Var) -> Var {
        let (vx, vv) = (self.value_arc(x), self.value_arc(v));
        let x2 = as2(&vx);
        let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
        assert_eq!(x2.ncols(), v1.len());
        let out = &x2 * &v1;
        self.push(
            Arc::new(dyn2(out)),
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                let x2 = as2(&vx);
                let v1 = vv.view().into_dimensionality::<Ix1>().unwrap();
                store.accum(x.0, dyn2(&g2 * &v1));
                store.accum(v.0, (&g2 * &x2).sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let vx = self.value_arc(x);
        // `.t().to_owned()` can keep reversed strides; force standard layout
        // so downstream reshapes see C order.
        let out = standardize(dyn2(as2(&vx).t().to_owned()));
        self.push(
            Arc::new(out),
            Some(Box::new(move |g, store| {
                store.accum(x.0, standardize(dyn2(as2(g).t().to_owned())));
            })),
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let vx = self.value_arc(x);
        let old_shape: Vec<usize> = vx.shape().to_vec();
        let out = standardize(vx.as_ref().clone())
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape size mismatch");
        self.push(
            Arc::new(out),
            Some(Box::new(move |g, store| {
                let dx = standardize(g.clone())
                    .into_shape_with_order(IxDyn(&old_shape))
                    .expect("reshape backward");
                store.accum(x.0, dx);
            })),
        )
    }

    /// Strided 2-D convolution via im2col. `x (cin,h,w)`, `w (cout,cin,kh,kw)`,
    /// `b (cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw, vb) = (self.value_arc(x), self.value_arc(w), self.value_arc(b));
        let x3 = vx.view().into_dimensionality::<Ix3>().expect("conv input rank 3");
        let wdims = vw.shape().to_vec();
        assert_eq!(wdims.len(), 4, "conv kernel rank 4");
        let (cout, cin, kh, kw) = (wdims[0], wdims[1], wdims[2], wdims[3]);
        let (xc, h, wd) = (x3.dim().0, x3.dim().1, x3.dim().2);
        assert_eq!(xc, cin, "conv channel mismatch");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;

        let cols = im2col(&x3.to_owned(), kh, kw, stride, pad, oh, ow);
        let wm = vw
            .as_ref()
            .clone()
            .into_shape_with_order((cout, cin * kh * kw))
            .unwrap();
        let b1 = vb.view().into_dimensionality::<Ix1>().unwrap();
        let mut out2 = cols.dot(&wm.t()); // (oh*ow, cout)
        out2 += &b1;
        let mut out = Array3::<F>::zeros((cout, oh, ow));
        for co in 0..cout {
            for i in 0..oh {
                for j in 0..ow {
                    out[(co, i, j)] = out2[(i * ow + j, co)];
                }
            }
        }
        let cols = Arc::new(cols);
        let cols_b = Arc::clone(&cols);
        self.push(
            Arc::new(out.into_dyn()),
            Some(Box::new(move |g, store| {
                let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
                let mut gout2 = Array2::<F>::zeros((oh * ow, cout));
                for co in 0..cout {
                    for i in 0..oh {
                        for j in 0..ow {
                            gout2[(i * ow + j, co)] = g3[(co, i, j)];
                        }
                    }
                }
                let wm = vw
                    .as_ref()
                    .clone()
                    .into_shape_with_order((cout, cin * kh * kw))
                    .unwrap();
                let dwm = gout2.t().dot(&*cols_b); // (cout, cin*kh*kw)
                let dcols = gout2.dot(&wm); // (oh*ow, cin*kh*kw)
                let dx = col2im(&dcols, cin, h, wd, kh, kw, stride, pad, oh, ow);
                store.accum(x.0, dx.into_dyn());
                store.accum(
                    w.0,
                    dwm.into_shape_with_order(IxDyn(&[cout, cin, kh, kw])).unwrap(),
                );
                store.accum(b.0, gout2.sum_axis(Axis(0)).into_dyn());
            })),
        )
    }

    /// Bilinear upsample of a rank-2 grid (half-pixel centers, edges clamped).
    pub fn bilinear_upsample(&mut self, x: Var, out_h: usize, out_w: usize) -> Var {
        let vx = self.value_arc(x);
        let x2 = as2(&vx);
        let (h, w) = (x2.nrows(), x2.ncols());
        let taps = bilinear_taps(h, w, out_h, out_w);
        let mut out = Array2::<F>::zeros((out_h, out_w));
        for (oi, row) in taps.iter().enumerate() {
            for (oj, cell) in row.iter().enumerate() {
                let mut acc = F::zero();
                for &((si, sj), wgt) in cell {
                    acc = acc + x2[(si, sj)] * fl::<F>(wgt);
                }
                out[(oi, oj)] = acc;
            }
        }
        let taps = Arc::new(taps);
        self.push(
            Arc::new(dyn2(out)),
            Some(Box::new(move |g, store| {
                let g2 = as2(g);
                let mut dx = Array2::<F>::zeros((h, w));
                for (oi, row) in taps.iter().enumerate() {
                    for (oj, cell) in row.iter().enumerate() {
                        for &((si, sj), wgt) in cell {
                            dx[(si, sj)] = dx[(si, sj)] + g2[(oi, oj)] * fl::<F>(wgt);
                        }
                    }
                }
                store.accum(x.0, dyn2(dx));
            })),
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let vx = self.value_arc(x);
        let total = vx.iter().fold(F::zero(), |a, &b| a + b);
        let shape = vx.raw_dim();
        self.push(
            Arc::new(scalar_arr(total)),
            Some(Box::new(move |g, store| {
                let gi = g[[0]];
                store.accum(x.0, ArrayD::from_elem(shape.clone(), gi));
            })),
        )
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// `sum(x * weights)` with constant weights; handy scalarizer for checks.
    pub fn weighted_sum(&mut self, x: Var, weights: ArrayD<F>) -> Var {
        let vx = self.value_arc(x);
        assert_eq!(vx.shape(), weights.shape());
        let total = vx
            .iter()
            .zip(weights.iter())
            .fold(F::zero(), |a, (&xi, &wi)| a + xi * wi);
        self.push(
            Arc::new(scalar_arr(total)),
            Some(Box::new(move |g, store| {
                let gi = g[[0]];
                store.accum(x.0, weights.mapv(|w| w * gi));
            })),
        )
    }

    /// Scalar linear combination `sum_i coeff_i * term_i`.
    pub fn affine_combination(&mut self, terms: &[(Var, f64)]) -> Var {
        let mut total = F::zero();
        for &(v, c) in terms {
            total = total + self.scalar_value(v) * fl::<F>(c);
        }
        let owned: Vec<(Var, f64)> = terms.to_vec();
        self.push(
            Arc::new(scalar_arr(total)),
            Some(Box::new(move |g, store| {
                let gi = g[[0]];
                for &(v, c) in &owned {
                    store.accum(v.0, scalar_arr(gi * fl::<F>(c)));
                }
            })),
        )
    }

    /// Mean token-level cross entropy over `supervised` positions.
    /// Panics if no position is supervised; callers gate on that.
    pub fn lm_cross_entropy(&mut self, logits: Var, targets: &[usize], supervised: &[bool]) -> Var {
        let vl = self.value_arc(logits);
        let l2 = as2(&vl);
        let n = l2.nrows();
        assert_eq!(targets.len(), n);
        assert_eq!(supervised.len(), n);
        let m = supervised.iter().filter(|&&s| s).count();
        assert!(m > 0, "lm_cross_entropy with zero supervised positions");
        let inv_m: F = fl(1.0 / m as f64);
        let mut probs = Array2::<F>::zeros(l2.raw_dim());
        let mut loss = F::zero();
        for r in 0..n {
            let row = l2.row(r);
            let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
            let mut denom = F::zero();
            for (c, &z) in row.iter().enumerate() {
                let e = (z - max).exp();
                probs[(r, c)] = e;
                denom = denom + e;
            }
            for c in 0..row.len() {
                probs[(r, c)] = probs[(r, c)] / denom;
            }
            if supervised[r] {
                loss = loss - probs[(r, targets[r])].ln();
            }
        }
        loss = loss * inv_m;
        let targets: Vec<usize> = targets.to_vec();
        let supervised: Vec<bool> = supervised.to_vec();
        self.push(
            Arc::new(scalar_arr(loss)),
            Some(Box::new(move |g, store| {
                let gi = g[[0]] * inv_m;
                let mut dl = Array2::<F>::zeros(probs.raw_dim());
                for r in 0..dl.nrows() {
                    if !supervised[r] {
                        continue;
                    }
                    for c in 0..dl.ncols() {
                        let indicator = if c == targets[r] { F::one() } else { F::zero() };
                        dl[(r, c)] = gi * (probs[(r, c)] - indicator);
                    }
                }
                store.accum(logits.0, dyn2(dl));
            })),
        )
    }

    /// Mean binary cross entropy with logits against a constant target grid.
    pub fn bce_with_logits_mean(&mut self, logits: Var, target: Arc<ArrayD<F>>) -> Var {
        let vl = self.value_arc(logits);
        assert_eq!(vl.shape(), target.shape());
        let n = vl.len();
        let inv_n: F = fl(1.0 / n as f64);
        let mut loss = F::zero();
        for (&z, &t) in vl.iter().zip(target.iter()) {
            loss = loss + z.max(F::zero()) - z * t + (F::one() + (-z.abs()).exp()).ln();
        }
        loss = loss * inv_n;
        self.push(
            Arc::new(scalar_arr(loss)),
            Some(Box::new(move |g, store| {
                let gi = g[[0]] * inv_n;
                let mut dl = vl.as_ref().clone();
                dl.zip_mut_with(&target, |z, &t| *z = gi * (sigmoid_scalar(*z) - t));
                store.accum(logits.0, dl);
            })),
        )
    }

    /// Soft Dice loss `1 - (2*|P.G| + eps) / (|P| + |G| + eps)` with
    /// `P = sigmoid(logits)`.
    pub fn dice_loss(&mut self, logits: Var, target: Arc<ArrayD<F>>, eps: f64) -> Var {
        let vl = self.value_arc(logits);
        assert_eq!(vl.shape(), target.shape());
        let epsf: F = fl(eps);
        let p = vl.mapv(sigmoid_scalar);
        let mut inter = F::zero();
        let mut psum = F::zero();
        let mut gsum = F::zero();
        for (&pi, &ti) in p.iter().zip(target.iter()) {
            inter = inter + pi * ti;
            psum = psum + pi;
            gsum = gsum + ti;
        }
        let two: F = fl(2.0);
        let denom = psum + gsum + epsf;
        let loss = F::one() - (two * inter + epsf) / denom;
        self.push(
            Arc::new(scalar_arr(loss)),
            Some(Box::new(move |g, store| {
                let gi = g[[0]];
                let num = two * inter + epsf;
                let mut dl = p.clone();
                dl.zip_mut_with(&target, |pv, &ti| {
                    let ddice_dp = (two * ti * denom - num) / (denom * denom);
                    *pv = gi * (-ddice_dp) * *pv * (F::one() - *pv);
                });
                store.accum(logits.0, dl);
            })),
        )
    }

    /// Extracts `[x[row, col_a], x[row, col_b]]` as a 2-vector.
    pub fn gather_pair(&mut self, x: Var, row: usize, col_a: usize, col_b: usize) -> Var {
        let vx = self.value_arc(x);
        let x2 = as2(&vx);
        let shape = (x2.nrows(), x2.ncols());
        let mut out = ArrayD::zeros(IxDyn(&[2]));
        out[[0]] = x2[(row, col_a)];
        out[[1]] = x2[(row, col_b)];
        self.push(
            Arc::new(out),
            Some(Box::new(move |g, store| {
                let mut dx = Array2::<F>::zeros(shape);
                dx[(row, col_a)] = g[[0]];
                dx[(row, col_b)] = g[[1]];
                store.accum(x.0, dyn2(dx));
            })),
        )
    }

    /// Binary cross entropy of `sigmoid(pair[0] - pair[1])` against label `y`.
    /// The reported value clamps the probability into `[clamp, 1-clamp]`; the
    /// gradient follows the smooth unclamped objective.
    pub fn bce_sigmoid_diff(&mut self, pair: Var, y: f64, clamp: f64) -> Var {
        let vp = self.value_arc(pair);
        assert_eq!(vp.len(), 2, "bce_sigmoid_diff expects a 2-vector");
        let z = vp[[0]] - vp[[1]];
        let p = sigmoid_scalar(z);
        let pc = clamp_prob(p, fl::<F>(clamp));
        let yf: F = fl(y);
        let loss = -(yf * pc.ln() + (F::one() - yf) * (F::one() - pc).ln());
        self.push(
            Arc::new(scalar_arr(loss)),
            Some(Box::new(move |g, store| {
                let gi = g[[0]];
                let dz = gi * (p - yf);
                let mut dp = ArrayD::zeros(IxDyn(&[2]));
                dp[[0]] = dz;
                dp[[1]] = -dz;
                store.accum(pair.0, dp);
            })),
        )
    }

    /// Maps 4 raw activations to a valid corner box: sigmoid each, then order
    /// the x and y pairs so `x1<=x2`, `y1<=y2`. Output layout `[x1,y1,x2,y2]`.
    pub fn sigmoid_sorted_box(&mut self, raw: Var) -> Var {
        let vr = self.value_arc(raw);
        assert_eq!(vr.len(), 4);
        let sv: Vec<F> = vr.iter().map(|&x| sigmoid_scalar(x)).collect();
        let (xa, ya, xb, yb) = (sv[0], sv[1], sv[2], sv[3]);
        // perm[out] = source index within the sigmoid vector
        let (x1s, x2s) = if xa <= xb { (0usize, 2usize) } else { (2, 0) };
        let (y1s, y2s) = if ya <= yb { (1usize, 3usize) } else { (3, 1) };
        let mut out = ArrayD::zeros(IxDyn(&[4]));
        out[[0]] = sv[x1s];
        out[[1]] = sv[y1s];
        out[[2]] = sv[x2s];
        out[[3]] = sv[y2s];
        let perm = [x1s, y1s, x2s, y2s];
        self.push(
            Arc::new(out),
            Some(Box::new(move |g, store| {
                let mut dr = ArrayD::zeros(IxDyn(&[4]));
                for (o, &src) in perm.iter().enumerate() {
                    let s = sv[src];
                    dr[[src]] = dr[[src]] + g[[o]] * s * (F::one() - s);
                }
                store.accum(raw.0, dr);
            })),
        )
    }

    /// Box regression loss: smooth-L1 (beta = 1, summed over coordinates)
    /// plus `1 - GIoU`. `box_pred` and `gt` are `[x1,y1,x2,y2]` corner boxes.
    pub fn detection_loss(&mut self, box_pred: Var, gt: [f64; 4]) -> Var {
        let vb = self.value_arc(box_pred);
        assert_eq!(vb.len(), 4);
        let b = [vb[[0]], vb[[1]], vb[[2]], vb[[3]]];
        let g: [F; 4] = [fl(gt[0]), fl(gt[1]), fl(gt[2]), fl(gt[3])];

        let mut smooth = F::zero();
        let mut dsmooth = [F::zero(); 4];
        for i in 0..4 {
            let d = b[i] - g[i];
            if d.abs() < F::one() {
                smooth = smooth + fl::<F>(0.5) * d * d;
                dsmooth[i] = d;
            } else {
                smooth = smooth + d.abs() - fl::<F>(0.5);
                dsmooth[i] = if d > F::zero() { F::one() } else { -F::one() };
            }
        }

        let (giou, dgiou) = giou_with_grad(b, g);
        let loss = smooth + F::one() - giou;
        self.push(
            Arc::new(scalar_arr(loss)),
            Some(Box::new(move |go, store| {
                let gi = go[[0]];
                let mut db = ArrayD::zeros(IxDyn(&[4]));
                for i in 0..4 {
                    db[[i]] = gi * (dsmooth[i] - dgiou[i]);
                }
                store.accum(box_pred.0, db);
            })),
        )
    }

    /// Inverted dropout with a caller-provided keep mask (`true` keeps).
    pub fn dropout_mask(&mut self, x: Var, keep: Arc<ArrayD<bool>>, rate: f64) -> Var {
        if rate == 0.0 {
            return x;
        }
        let vx = self.value_arc(x);
        assert_eq!(vx.shape(), keep.shape());
        let scale: F = fl(1.0 / (1.0 - rate));
        let mut out = vx.as_ref().clone();
        for (o, &k) in out.iter_mut().zip(keep.iter()) {
            *o = if k { *o * scale } else { F::zero() };
        }
        self.push(
            Arc::new(out),
            Some(Box::new(move |g, store| {
                let mut dx = g.clone();
                for (d, &k) in dx.iter_mut().zip(keep.iter()) {
                    *d = if k { *d * scale } else { F::zero() };
                }
                store.accum(x.0, dx);
            })),
        )
    }
}

fn standardize<F: Scalar>(a: ArrayD<F>) -> ArrayD<F> {
    if a.is_standard_layout() {
        a
    } else {
        let shape = a.raw_dim();
        ArrayD::from_shape_vec(shape, a.iter().cloned().collect()).unwrap()
    }
}

fn sigmoid_scalar<F: Scalar>(z: F) -> F {
    if z >= F::zero() {
        F::one() / (F::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (F::one() + e)
    }
}

fn clamp_prob<F: Scalar>(p: F, eps: F) -> F {
    p.max(eps).min(F::one() - eps)
}

/// GIoU and its gradient w.r.t. the predicted corners.
fn giou_with_grad<F: Scalar>(b: [F; 4], g: [F; 4]) -> (F, [F; 4]) {
    let zero = F::zero();
    let (bx1, by1, bx2, by2) = (b[0], b[1], b[2], b[3]);
    let (gx1, gy1, gx2, gy2) = (g[0], g[1], g[2], g[3]);

    let iw = bx2.min(gx2) - bx1.max(gx1);
    let ih = by2.min(gy2) - by1.max(gy1);
    let overlap = iw > zero && ih > zero;
    let inter = if overlap { iw * ih } else { zero };

    let ap = (bx2 - bx1) * (by2 - by1);
    let ag = (gx2 - gx1) * (gy2 - gy1);
    let union = ap + ag - inter;

    let ew = bx2.max(gx2) - bx1.min(gx1);
    let eh = by2.max(gy2) - by1.min(gy1);
    let enc = ew * eh;

    let iou = inter / union;
    let giou = iou - (enc - union) / enc;

    // dInter
    let mut dinter = [zero; 4];
    if overlap {
        dinter[0] = if bx1 > gx1 { -ih } else { zero };
        dinter[2] = if bx2 < gx2 { ih } else { zero };
        dinter[1] = if by1 > gy1 { -iw } else { zero };
        dinter[3] = if by2 < gy2 { iw } else { zero };
    }
    // dAp
    let dap = [-(by2 - by1), -(bx2 - bx1), by2 - by1, bx2 - bx1];
    // dEnc
    let mut denc = [zero; 4];
    denc[0] = if bx1 < gx1 { -eh } else { zero };
    denc[2] = if bx2 > gx2 { eh } else { zero };
    denc[1] = if by1 < gy1 { -ew } else { zero };
    denc[3] = if by2 > gy2 { ew } else { zero };

    let mut dgiou = [zero; 4];
    for i in 0..4 {
        let dunion = dap[i] - dinter[i];
        let diou = (dinter[i] * union - inter * dunion) / (union * union);
        // d(GIoU) = dIoU - d(enc - union)/enc ; (enc-union)/enc = 1 - union/enc
        let dtail = (dunion * enc - union * denc[i]) / (enc * enc);
        dgiou[i] = diou + dtail;
    }
    (giou, dgiou)
}

fn im2col<F: Scalar>(
    x: &Array3<F>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<F> {
    let (cin, h, w) = x.dim();
    let mut cols = Array2::<F>::zeros((oh * ow, cin * kh * kw));
    for oi in 0..oh {
        for oj in 0..ow {
            let r = oi * ow + oj;
            for ci in 0..cin {
                for ki in 0..kh {
                    let yy = (oi * stride + ki) as isize - pad as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let xx = (oj * stride + kj) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        cols[(r, (ci * kh + ki) * kw + kj)] = x[(ci, yy as usize, xx as usize)];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<F: Scalar>(
    dcols: &Array2<F>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array3<F> {
    let mut dx = Array3::<F>::zeros((cin, h, w));
    for oi in 0..oh {
        for oj in 0..ow {
            let r = oi * ow + oj;
            for ci in 0..cin {
                for ki in 0..kh {
                    let yy = (oi * stride + ki) as isize - pad as isize;
                    if yy < 0 || yy >= h as isize {
                        continue;
                    }
                    for kj in 0..kw {
                        let xx = (oj * stride + kj) as isize - pad as isize;
                        if xx < 0 || xx >= w as isize {
                            continue;
                        }
                        dx[(ci, yy as usize, xx as usize)] =
                            dx[(ci, yy as usize, xx as usize)] + dcols[(r, (ci * kh + ki) * kw + kj)];
                    }
                }
            }
        }
    }
    dx
}

/// Sample positions and weights for bilinear interpolation (half-pixel
/// centers, clamped at the borders). Shared by forward and backward.
#[allow(clippy::type_complexity)]
fn bilinear_taps(
    h: usize,
    w: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<Vec<[((usize, usize), f64); 4]>> {
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut taps = Vec::with_capacity(out_h);
    for oi in 0..out_h {
        let fy = ((oi as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        let mut row = Vec::with_capacity(out_w);
        for oj in 0..out_w {
            let fx = ((oj as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            row.push([
                ((y0, x0), (1.0 - wy) * (1.0 - wx)),
                ((y0, x1), (1.0 - wy) * wx),
                ((y1, x0), wy * (1.0 - wx)),
                ((y1, x1), wy * wx),
            ]);
        }
        taps.push(row);
    }
    taps
}
