//! Dense, ReLU, pooled shortcut, dropout and weighted softmax cross-entropy.

use rand::Rng;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Calls `f` with the flat offset of every valid channel vector. For rank-4
/// input `[B, H, W, C]` an item's valid extent limits axis 2; other ranks treat
/// all leading positions as valid.
pub(crate) fn for_each_valid(shape: &[usize], valid: Option<&[usize]>, mut f: impl FnMut(usize)) {
    let c = *shape.last().unwrap_or(&1);
    match (shape.len(), valid) {
        (4, Some(valid)) => {
            let (b, h, w) = (shape[0], shape[1], shape[2]);
            for bi in 0..b {
                let vw = valid[bi].min(w);
                for y in 0..h {
                    for x in 0..vw {
                        f(((bi * h + y) * w + x) * c);
                    }
                }
            }
        }
        _ => {
            let n: usize = shape[..shape.len().saturating_sub(1)].iter().product();
            for p in 0..n {
                f(p * c);
            }
        }
    }
}

/// Writes exact zeros beyond each item's valid time extent (axis 2).
pub fn zero_invalid<T: Real>(x: &mut Tensor<T>, valid: &[usize]) {
    if x.shape().len() != 4 {
        return;
    }
    let [b, h, w, c] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let data = x.data_mut();
    for bi in 0..b {
        let vw = valid[bi].min(w);
        if vw == w {
            continue;
        }
        for y in 0..h {
            let row = ((bi * h + y) * w) * c;
            data[row + vw * c..row + w * c].fill(T::zero());
        }
    }
}

/// Valid extents after a stride-2 reduction.
pub fn halve_extents(valid: &[usize]) -> Vec<usize> {
    valid.iter().map(|v| v.div_ceil(2)).collect()
}

pub fn relu<T: Real>(x: &mut Tensor<T>) {
    for v in x.data_mut() {
        if !(*v > T::zero()) {
            *v = T::zero();
        }
    }
}

/// Masks `dy` in place with the ReLU derivative evaluated at output `y`.
pub fn relu_backward<T: Real>(y: &Tensor<T>, dy: &mut Tensor<T>) {
    for (g, &v) in dy.data_mut().iter_mut().zip(y.data()) {
        if !(v > T::zero()) {
            *g = T::zero();
        }
    }
}

/// `y = x·W + b` for `x: [B, In]`, `W: [In, Out]`.
pub fn dense<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, fan_in) = (x.dim(0), x.len() / x.dim(0).max(1));
    if w.shape().len() != 2 || w.dim(0) != fan_in || b.len() != w.dim(1) {
        return Err(Error::shape(
            "dense",
            format!("x {:?}, W {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let out = w.dim(1);
    let mut y = Tensor::zeros(&[rows, out]);
    for row in y.data_mut().chunks_exact_mut(out) {
        row.copy_from_slice(b.data());
    }
    T::gemm(
        rows,
        fan_in,
        out,
        T::one(),
        x.data(),
        fan_in as isize,
        1,
        w.data(),
        out as isize,
        1,
        T::one(),
        y.data_mut(),
        out as isize,
        1,
    );
    Ok(y)
}

/// Accumulates `dW`, `db` and returns `dx`.
pub fn dense_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    dw: Option<&mut Tensor<T>>,
    db: Option<&mut Tensor<T>>,
) -> Result<Tensor<T>> {
    let (rows, fan_in, out) = (x.dim(0), w.dim(0), w.dim(1));
    if dy.shape() != [rows, out] {
        return Err(Error::shape("dense_backward", format!("dy {:?}", dy.shape())));
    }
    if let Some(dw) = dw {
        T::gemm(
            fan_in,
            rows,
            out,
            T::one(),
            x.data(),
            1,
            fan_in as isize,
            dy.data(),
            out as isize,
            1,
            T::one(),
            dw.data_mut(),
            out as isize,
            1,
        );
    }
    if let Some(db) = db {
        for row in dy.data().chunks_exact(out) {
            for (d, &g) in db.data_mut().iter_mut().zip(row) {
                *d += g;
            }
        }
    }
    let mut dx = Tensor::zeros(x.shape());
    T::gemm(
        rows,
        out,
        fan_in,
        T::one(),
        dy.data(),
        out as isize,
        1,
        w.data(),
        1,
        out as isize,
        T::zero(),
        dx.data_mut(),
        fan_in as isize,
        1,
    );
    Ok(dx)
}

/// Number of valid input cells pooled into each output cell along one axis.
fn pool_span(out_idx: usize, limit: usize) -> (usize, usize) {
    let lo = 2 * out_idx;
    let hi = (lo + 2).min(limit);
    (lo, hi)
}

/// Residual shortcut for a stride-2 block: 2×2/stride-2 average pooling
/// (edge cells average over the valid cells they cover) concatenated with an
/// equal number of zero channels. Output `[B, ceil(H/2), ceil(W/2), 2C]`.
pub fn pooled_shortcut<T: Real>(x: &Tensor<T>, valid: &[usize]) -> Result<Tensor<T>> {
    if x.shape().len() != 4 {
        return Err(Error::shape("shortcut", format!("input {:?}", x.shape())));
    }
    let [b, h, w, c] = [x.dim(0), x.dim(1), x.dim(2), x.dim(3)];
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut y = Tensor::zeros(&[b, ho, wo, 2 * c]);
    for bi in 0..b {
        let vw = valid[bi].min(w);
        for oy in 0..ho {
            let (y0, y1) = pool_span(oy, h);
            for ox in 0..vw.div_ceil(2) {
                let (x0, x1) = pool_span(ox, vw);
                let inv = T::one() / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                let dst = ((bi * ho + oy) * wo + ox) * 2 * c;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let src = ((bi * h + iy) * w + ix) * c;
                        for ch in 0..c {
                            let v = x.data()[src + ch];
                            y.data_mut()[dst + ch] += v;
                        }
                    }
                }
                for v in &mut y.data_mut()[dst..dst + c] {
                    *v *= inv;
                }
            }
        }
    }
    Ok(y)
}

pub fn pooled_shortcut_backward<T: Real>(
    input_shape: &[usize],
    dy: &Tensor<T>,
    valid: &[usize],
) -> Tensor<T> {
    let [b, h, w, c] = [input_shape[0], input_shape[1], input_shape[2], input_shape[3]];
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut dx = Tensor::zeros(input_shape);
    for bi in 0..b {
        let vw = valid[bi].min(w);
        for oy in 0..ho {
            let (y0, y1) = pool_span(oy, h);
            for ox in 0..vw.div_ceil(2) {
                let (x0, x1) = pool_span(ox, vw);
                let inv = T::one() / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                let src = ((bi * ho + oy) * wo + ox) * 2 * c;
                for iy in y0..y1 {
                    for ix in x0..x1 {
                        let dst = ((bi * h + iy) * w + ix) * c;
                        for ch in 0..c {
                            dx.data_mut()[dst + ch] += dy.data()[src + ch] * inv;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Inverted dropout. Returns the scaled keep mask (empty when inactive).
pub fn dropout<T: Real, R: Rng>(x: &mut Tensor<T>, rate: f64, train: bool, rng: &mut R) -> Vec<T> {
    if !train || rate <= 0.0 {
        return Vec::new();
    }
    let scale = T::from_f64(1.0 / (1.0 - rate));
    let mask: Vec<T> = (0..x.len())
        .map(|_| {
            if rng.random::<f64>() < rate {
                T::zero()
            } else {
                scale
            }
        })
        .collect();
    for (v, &m) in x.data_mut().iter_mut().zip(&mask) {
        *v *= m;
    }
    mask
}

pub fn dropout_backward<T: Real>(dy: &mut Tensor<T>, mask: &[T]) {
    if mask.is_empty() {
        return;
    }
    for (g, &m) in dy.data_mut().iter_mut().zip(mask) {
        *g *= m;
    }
}

/// Mean over the batch of `weight[y_i] * -ln softmax(logits_i)[y_i]`.
/// Returns the loss and its gradient with respect to the logits.
pub fn softmax_xent<T: Real>(
    logits: &Tensor<T>,
    labels: &[usize],
    class_weights: &[f64],
) -> Result<(f64, Tensor<T>)> {
    if logits.shape().len() != 2 || logits.dim(0) != labels.len() {
        return Err(Error::shape(
            "softmax_xent",
            format!("logits {:?} for {} labels", logits.shape(), labels.len()),
        ));
    }
    let (b, k) = (logits.dim(0), logits.dim(1));
    if class_weights.len() != k {
        return Err(Error::shape(
            "softmax_xent",
            format!("{} class weights for {k} classes", class_weights.len()),
        ));
    }
    let mut grad = Tensor::zeros(&[b, k]);
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: k,
            });
        }
        let row = &logits.data()[i * k..(i + 1) * k];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.to_f64()));
        let sum: f64 = row.iter().map(|v| (v.to_f64() - max).exp()).sum();
        let log_z = max + sum.ln();
        let wy = class_weights[y];
        loss += wy * (log_z - row[y].to_f64());
        let g = &mut grad.data_mut()[i * k..(i + 1) * k];
        for (j, gj) in g.iter_mut().enumerate() {
            let p = (row[j].to_f64() - log_z).exp();
            let target = if j == y { 1.0 } else { 0.0 };
            *gj = T::from_f64(wy * (p - target) / b as f64);
        }
    }
    Ok((loss / b as f64, grad))
}

pub fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}
