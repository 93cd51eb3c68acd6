//! Batch normalization over channels-last activations with time masking.
//!
//! Statistics in train mode are taken over every non-channel position that is
//! inside the item's valid time extent; padded positions are written as exact
//! zeros and receive zero gradient.

use super::layers::{for_each_valid, zero_invalid};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

pub const BN_MOMENTUM: f64 = 0.99;
pub const BN_EPSILON: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameter views for one batch-norm layer.
pub struct BnParams<'a, T> {
    pub gamma: &'a Tensor<T>,
    pub beta: &'a Tensor<T>,
    pub running_mean: &'a mut Tensor<T>,
    pub running_var: &'a mut Tensor<T>,
    /// Weight of the old running statistics per update.
    pub momentum: f64,
}

/// Values kept from the forward pass for the reverse pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    count: usize,
    mode: Mode,
}

fn channels<T: Real>(x: &Tensor<T>, gamma: &Tensor<T>) -> Result<usize> {
    let c = *x.shape().last().ok_or_else(|| Error::shape("batch_norm", "rank 0"))?;
    if gamma.len() != c {
        return Err(Error::shape(
            "batch_norm",
            format!("input has {c} channels, state has {}", gamma.len()),
        ));
    }
    Ok(c)
}

/// `valid` holds per-item valid extents along axis 2 for rank-4 input; `None`
/// treats every position as valid.
pub fn batch_norm<T: Real>(
    x: &Tensor<T>,
    p: BnParams<'_, T>,
    valid: Option<&[usize]>,
    mode: Mode,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let c = channels(x, p.gamma)?;
    let eps = T::from_f64(BN_EPSILON);
    let mut xhat = x.clone();
    let mut count = 0usize;
    let inv_std: Vec<T> = match mode {
        Mode::Train => {
            let mut sum = vec![0.0f64; c];
            for_each_valid(x.shape(), valid, |off| {
                count += 1;
                for (s, v) in sum.iter_mut().zip(&x.data()[off..off + c]) {
                    *s += v.to_f64();
                }
            });
            if count == 0 {
                return Err(Error::shape("batch_norm", "no valid positions"));
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / count as f64).collect();
            let mut sq = vec![0.0f64; c];
            for_each_valid(x.shape(), valid, |off| {
                for ((s, v), m) in sq.iter_mut().zip(&x.data()[off..off + c]).zip(&mean) {
                    let d = v.to_f64() - m;
                    *s += d * d;
                }
            });
            let var: Vec<f64> = sq.iter().map(|s| s / count as f64).collect();
            let mom = p.momentum;
            for ch in 0..c {
                let rm = &mut p.running_mean.data_mut()[ch];
                *rm = T::from_f64(mom * rm.to_f64() + (1.0 - mom) * mean[ch]);
                let rv = &mut p.running_var.data_mut()[ch];
                *rv = T::from_f64(mom * rv.to_f64() + (1.0 - mom) * var[ch]);
            }
            let inv: Vec<T> = var
                .iter()
                .map(|v| T::one() / (T::from_f64(*v) + eps).sqrt())
                .collect();
            let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64(m)).collect();
            normalize(&mut xhat, &mean_t, &inv, c);
            inv
        }
        Mode::Eval => {
            let inv: Vec<T> = p
                .running_var
                .data()
                .iter()
                .map(|&v| T::one() / (v + eps).sqrt())
                .collect();
            normalize(&mut xhat, p.running_mean.data(), &inv, c);
            count = x.len() / c;
            inv
        }
    };
    let mut y = xhat.clone();
    for chunk in y.data_mut().chunks_exact_mut(c) {
        for ((v, &g), &b) in chunk.iter_mut().zip(p.gamma.data()).zip(p.beta.data()) {
            *v = g * *v + b;
        }
    }
    if let Some(valid) = valid {
        zero_invalid(&mut y, valid);
        zero_invalid(&mut xhat, valid);
    }
    Ok((
        y,
        BnCache {
            xhat,
            inv_std,
            count,
            mode,
        },
    ))
}

fn normalize<T: Real>(x: &mut Tensor<T>, mean: &[T], inv: &[T], c: usize) {
    for chunk in x.data_mut().chunks_exact_mut(c) {
        for ((v, &m), &s) in chunk.iter_mut().zip(mean).zip(inv) {
            *v = (*v - m) * s;
        }
    }
}

pub struct BnGrads<'a, T> {
    pub gamma: Option<&'a mut Tensor<T>>,
    pub beta: Option<&'a mut Tensor<T>>,
}

/// Reverse pass; returns the input gradient and accumulates into `grads`.
pub fn batch_norm_backward<T: Real>(
    dy: &Tensor<T>,
    gamma: &Tensor<T>,
    cache: &BnCache<T>,
    valid: Option<&[usize]>,
    grads: BnGrads<'_, T>,
) -> Result<Tensor<T>> {
    let c = channels(dy, gamma)?;
    if dy.shape() != cache.xhat.shape() {
        return Err(Error::shape("batch_norm_backward", "dy shape"));
    }
    let mut dgamma = vec![0.0f64; c];
    let mut dbeta = vec![0.0f64; c];
    for_each_valid(dy.shape(), valid, |off| {
        let g = &dy.data()[off..off + c];
        let xh = &cache.xhat.data()[off..off + c];
        for ch in 0..c {
            dgamma[ch] += (g[ch] * xh[ch]).to_f64();
            dbeta[ch] += g[ch].to_f64();
        }
    });
    let mut dx = Tensor::zeros(dy.shape());
    match cache.mode {
        Mode::Train => {
            let n = T::from_f64(cache.count as f64);
            let dg: Vec<T> = dgamma.iter().map(|&v| T::from_f64(v)).collect();
            let db: Vec<T> = dbeta.iter().map(|&v| T::from_f64(v)).collect();
            let scale: Vec<T> = (0..c)
                .map(|ch| gamma.data()[ch] * cache.inv_std[ch] / n)
                .collect();
            for_each_valid(dy.shape(), valid, |off| {
                let g = &dy.data()[off..off + c];
                let xh = &cache.xhat.data()[off..off + c];
                let out = &mut dx.data_mut()[off..off + c];
                for ch in 0..c {
                    out[ch] = scale[ch] * (n * g[ch] - db[ch] - xh[ch] * dg[ch]);
                }
            });
        }
        Mode::Eval => {
            for_each_valid(dy.shape(), valid, |off| {
                let g = &dy.data()[off..off + c];
                let out = &mut dx.data_mut()[off..off + c];
                for ch in 0..c {
                    out[ch] = g[ch] * gamma.data()[ch] * cache.inv_std[ch];
                }
            });
        }
    }
    if let Some(dgam) = grads.gamma {
        for (d, v) in dgam.data_mut().iter_mut().zip(&dgamma) {
            *d += T::from_f64(*v);
        }
    }
    if let Some(dbet) = grads.beta {
        for (d, v) in dbet.data_mut().iter_mut().zip(&dbeta) {
            *d += T::from_f64(*v);
        }
    }
    Ok(dx)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn train_mode_standardizes_each_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<f64> = (0..4 * 3 * 5 * 2)
            .map(|i| rng.random_range(-20.0..50.0) + (i % 2) as f64 * 100.0)
            .collect();
        let x = Tensor::from_vec(&[4, 3, 5, 2], data).unwrap();
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::full(&[2], 1.0);
        let (y, _) = batch_norm(
            &x,
            BnParams {
                gamma: &gamma,
                beta: &beta,
                running_mean: &mut rm,
                running_var: &mut rv,
                momentum: BN_MOMENTUM,
            },
            None,
            Mode::Train,
        )
        .unwrap();
        for ch in 0..2 {
            let vals: Vec<f64> = y.data().iter().skip(ch).step_by(2).copied().collect();
            let n = vals.len() as f64;
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            assert!(mean.abs() < 1e-4);
            assert!((var - 1.0).abs() < 1e-4, "var {var}");
        }
        assert!(rm.data()[1] > rm.data()[0]);
    }

    #[test]
    fn eval_with_unit_stats_is_near_identity() {
        let x = Tensor::from_vec(&[1, 1, 3, 1], vec![0.5f64, -1.0, 2.0]).unwrap();
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::zeros(&[1]);
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        let (y, _) = batch_norm(
            &x,
            BnParams {
                gamma: &gamma,
                beta: &beta,
                running_mean: &mut rm,
                running_var: &mut rv,
                momentum: BN_MOMENTUM,
            },
            None,
            Mode::Eval,
        )
        .unwrap();
        let scale = 1.0 / (1.0f64 + BN_EPSILON).sqrt();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b * scale).abs() < 1e-12);
        }
        assert_eq!(rm.data(), &[0.0]);
    }

    #[test]
    fn masked_positions_are_zero_and_excluded() {
        // item 0 valid width 2 of 3, item 1 fully valid
        let x = Tensor::from_vec(&[2, 1, 3, 1], vec![1.0f64, 3.0, 100.0, 2.0, 2.0, 4.0]).unwrap();
        let gamma = Tensor::full(&[1], 1.0);
        let beta = Tensor::full(&[1], 0.5);
        let mut rm = Tensor::zeros(&[1]);
        let mut rv = Tensor::full(&[1], 1.0);
        let (y, _) = batch_norm(
            &x,
            BnParams {
                gamma: &gamma,
                beta: &beta,
                running_mean: &mut rm,
                running_var: &mut rv,
                momentum: BN_MOMENTUM,
            },
            Some(&[2, 3]),
            Mode::Train,
        )
        .unwrap();
        assert_eq!(y.data()[2], 0.0);
        // mean over {1,3,2,2,4} = 2.4
        assert!((rm.data()[0] - 0.01 * 2.4).abs() < 1e-12);
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let x = Tensor::<f32>::zeros(&[1, 2, 2, 3]);
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let mut rm = Tensor::zeros(&[2]);
        let mut rv = Tensor::full(&[2], 1.0);
        let res = batch_norm(
            &x,
            BnParams {
                gamma: &gamma,
                beta: &beta,
                running_mean: &mut rm,
                running_var: &mut rv,
                momentum: BN_MOMENTUM,
            },
            None,
            Mode::Train,
        );
        assert!(matches!(res, Err(Error::ShapeMismatch { .. })));
    }
}
