//! Attention pooling over the flattened frequency × time grid.
//!
//! For each position `i` with feature vector `x_i`:
//! `e_i = u · tanh(x_i W + b)`, `a_i = softmax_i(lambda * e_i)` and the pooled
//! output is `sum_i a_i x_i`. Positions past an item's valid time extent are
//! left out of both the softmax and the sum.

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub struct AttentionParams<'a, T> {
    pub w: &'a Tensor<T>,
    pub b: &'a Tensor<T>,
    pub u: &'a Tensor<T>,
    pub lambda: f64,
}

pub struct AttentionGrads<'a, T> {
    pub w: Option<&'a mut Tensor<T>>,
    pub b: Option<&'a mut Tensor<T>>,
    pub u: Option<&'a mut Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    /// tanh activations, `[B*N, D]`
    hidden: Tensor<T>,
    /// attention weights, `[B, N]`; zero at masked positions
    pub weights: Vec<T>,
}

fn dims<T: Real>(x: &Tensor<T>, p: &AttentionParams<'_, T>) -> Result<(usize, usize, usize, usize, usize)> {
    if x.shape().len() != 4 {
        return Err(Error::shape("attention_pool", format!("input {:?}", x.shape())));
    }
    let [b, h, w, c] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    if p.w.shape().len() != 2 || p.w.dim(0) != c {
        return Err(Error::shape(
            "attention_pool",
            format!("W {:?} for {c} channels", p.w.shape()),
        ));
    }
    let d = p.w.dim(1);
    if p.b.len() != d || p.u.len() != d {
        return Err(Error::shape("attention_pool", "b/u length"));
    }
    Ok((b, h, w, c, d))
}

fn is_valid(n: usize, w: usize, valid_w: usize) -> bool {
    n % w < valid_w
}

/// `x: [B, H, W, C]` → `[B, C]`.
pub fn attention_pool<T: Real>(
    x: &Tensor<T>,
    p: &AttentionParams<'_, T>,
    valid: &[usize],
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let (b, h, w, c, d) = dims(x, p)?;
    let n = h * w;
    let mut hidden = Tensor::zeros(&[b * n, d]);
    for row in hidden.data_mut().chunks_exact_mut(d) {
        row.copy_from_slice(p.b.data());
    }
    T::gemm(
        b * n,
        c,
        d,
        T::one(),
        x.data(),
        c as isize,
        1,
        p.w.data(),
        d as isize,
        1,
        T::one(),
        hidden.data_mut(),
        d as isize,
        1,
    );
    for v in hidden.data_mut() {
        *v = v.tanh();
    }
    let lambda = T::from_f64(p.lambda);
    let mut weights = vec![T::zero(); b * n];
    let mut out = Tensor::zeros(&[b, c]);
    for bi in 0..b {
        let vw = valid[bi].min(w);
        if vw == 0 {
            return Err(Error::AllMasked(bi));
        }
        let mut scores = vec![T::zero(); n];
        let mut max = None::<T>;
        for i in (0..n).filter(|&i| is_valid(i, w, vw)) {
            let hrow = &hidden.data()[(bi * n + i) * d..][..d];
            let e: T = hrow.iter().zip(p.u.data()).map(|(&a, &u)| a * u).sum();
            let s = lambda * e;
            scores[i] = s;
            max = Some(match max {
                Some(m) if m >= s => m,
                _ => s,
            });
        }
        let max = max.expect("at least one valid position");
        let wrow = &mut weights[bi * n..(bi + 1) * n];
        let mut z = T::zero();
        for i in (0..n).filter(|&i| is_valid(i, w, vw)) {
            let e = (scores[i] - max).exp();
            wrow[i] = e;
            z += e;
        }
        for i in (0..n).filter(|&i| is_valid(i, w, vw)) {
            wrow[i] /= z;
        }
        let orow = &mut out.data_mut()[bi * c..(bi + 1) * c];
        for i in (0..n).filter(|&i| is_valid(i, w, vw)) {
            let a = wrow[i];
            let xrow = &x.data()[(bi * n + i) * c..][..c];
            for (o, &xv) in orow.iter_mut().zip(xrow) {
                *o += a * xv;
            }
        }
    }
    Ok((out, AttentionCache { hidden, weights }))
}

/// Reverse pass; returns `dx` and accumulates parameter gradients.
pub fn attention_pool_backward<T: Real>(
    x: &Tensor<T>,
    p: &AttentionParams<'_, T>,
    valid: &[usize],
    cache: &AttentionCache<T>,
    dout: &Tensor<T>,
    mut grads: AttentionGrads<'_, T>,
) -> Result<Tensor<T>> {
    let (b, h, w, c, d) = dims(x, p)?;
    if dout.shape() != [b, c] {
        return Err(Error::shape("attention_pool_backward", "dout shape"));
    }
    let n = h * w;
    let lambda = T::from_f64(p.lambda);
    let mut dx = Tensor::zeros(x.shape());
    // gradient wrt the pre-activation x_i W + b, [B*N, D]
    let mut dz = Tensor::zeros(&[b * n, d]);
    for bi in 0..b {
        let vw = valid[bi].min(w);
        let g = &dout.data()[bi * c..(bi + 1) * c];
        let wrow = &cache.weights[bi * n..(bi + 1) * n];
        let mut dalpha = vec![T::zero(); n];
        let mut mean = T::zero();
        for i in (0..n).filter(|&i| is_valid(i, w, vw)) {
            let xrow = &x.data()[(bi * n + i) * c..][..c];
            let da: T = xrow.iter().zip(g).map(|(&a, &b)| a * b).sum();
            dalpha[i] = da;
            mean += wrow[i] * da;
            let dxrow = &mut dx.data_mut()[(bi * n + i) * c..][..c];
            for (o, &gv) in dxrow.iter_mut().zip(g) {
                *o += wrow[i] * gv;
            }
        }
        for i in (0..n).filter(|&i| is_valid(i, w, vw)) {
            let de = lambda * wrow[i] * (dalpha[i] - mean);
            let hrow = &cache.hidden.data()[(bi * n + i) * d..][..d];
            let dzrow = &mut dz.data_mut()[(bi * n + i) * d..][..d];
            for k in 0..d {
                dzrow[k] = de * p.u.data()[k] * (T::one() - hrow[k] * hrow[k]);
            }
            if let Some(du) = grads.u.as_deref_mut() {
                for (o, &hv) in du.data_mut().iter_mut().zip(hrow) {
                    *o += de * hv;
                }
            }
        }
    }
    if let Some(dw) = grads.w {
        T::gemm(
            c,
            b * n,
            d,
            T::one(),
            x.data(),
            1,
            c as isize,
            dz.data(),
            d as isize,
            1,
            T::one(),
            dw.data_mut(),
            d as isize,
            1,
        );
    }
    if let Some(db) = grads.b {
        for row in dz.data().chunks_exact(d) {
            for (o, &v) in db.data_mut().iter_mut().zip(row) {
                *o += v;
            }
        }
    }
    T::gemm(
        b * n,
        d,
        c,
        T::one(),
        dz.data(),
        d as isize,
        1,
        p.w.data(),
        1,
        d as isize,
        T::one(),
        dx.data_mut(),
        c as isize,
        1,
    );
    Ok(dx)
}
