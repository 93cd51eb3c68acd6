//! Central finite-difference verification of the reverse-mode gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::attention::{attention_pool, attention_pool_backward, AttentionGrads, AttentionParams};
use super::conv::{conv2d, conv2d_backward};
use super::layers::{dense, dense_backward, pooled_shortcut, pooled_shortcut_backward, relu, relu_backward, softmax_xent};
use super::norm::{batch_norm, batch_norm_backward, BnGrads, BnParams, Mode};
use super::params::{ParamId, ParamKind, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

pub const DEFAULT_STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-5;
pub const MAX_EXHAUSTIVE: usize = 10_000;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub label: String,
    pub max_rel_error: f64,
    pub coords_checked: usize,
    pub coords_total: usize,
    pub worst: String,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub step: f64,
    pub max_coords: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            step: DEFAULT_STEP,
            max_coords: MAX_EXHAUSTIVE,
            seed: 0,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// `eval(store, want_grad)` returns the scalar loss and, when `want_grad` is
/// set, leaves freshly zeroed-then-accumulated gradients in `store`.
pub fn grad_check<F>(
    label: &str,
    store: &mut ParamStore<f64>,
    mut eval: F,
    opts: GradCheckOptions,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut ParamStore<f64>, bool) -> Result<f64>,
{
    store.zero_grads();
    eval(store, true)?;
    let analytic: Vec<Tensor<f64>> = store.grads.clone();

    let mut coords: Vec<(ParamId, usize)> = Vec::new();
    for id in store.ids() {
        if store.kind(id) == ParamKind::Weight && store.is_trainable(id) {
            coords.extend((0..store.value(id).len()).map(|i| (id, i)));
        }
    }
    let total = coords.len();
    if total > opts.max_coords {
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let mut picked: Vec<usize> = sample(&mut rng, total, opts.max_coords).into_vec();
        picked.sort_unstable();
        coords = picked.into_iter().map(|i| coords[i]).collect();
    }

    let mut worst = (0.0f64, String::new());
    for &(id, i) in &coords {
        let orig = store.value(id).data()[i];
        store.value_mut(id).data_mut()[i] = orig + opts.step;
        let plus = eval(store, false)?;
        store.value_mut(id).data_mut()[i] = orig - opts.step;
        let minus = eval(store, false)?;
        store.value_mut(id).data_mut()[i] = orig;
        let numeric = (plus - minus) / (2.0 * opts.step);
        let err = relative_error(analytic[id.index()].data()[i], numeric);
        if err > worst.0 || worst.1.is_empty() {
            worst = (
                err,
                format!(
                    "{}[{}] analytic {:e} numeric {:e}",
                    store.name(id),
                    i,
                    analytic[id.index()].data()[i],
                    numeric
                ),
            );
        }
    }
    Ok(GradCheckReport {
        label: label.to_string(),
        max_rel_error: worst.0,
        coords_checked: coords.len(),
        coords_total: total,
        worst: worst.1,
    })
}

fn random_tensor(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-scale..scale)).collect())
        .expect("shape and length agree")
}

/// Fixed random projection used as a scalar loss over an op's output.
fn probe_loss(y: &Tensor<f64>, probe: &Tensor<f64>) -> (f64, Tensor<f64>) {
    let loss = y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum();
    (loss, probe.clone())
}

/// Checks each differentiable op in isolation (input gradients included, by
/// registering the input as a parameter).
pub fn op_suite(opts: GradCheckOptions) -> Result<Vec<GradCheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed);
    let mut reports = Vec::new();

    for (label, kh, stride) in [("conv2d 3x3 s1", 3, 1), ("conv2d 3x3 s2", 3, 2), ("conv2d 1x1 s2", 1, 2)] {
        let mut s = ParamStore::new();
        let x = s.add("input", ParamKind::Weight, random_tensor(&[2, 5, 6, 3], 1.0, &mut rng))?;
        let k = s.add("kernel", ParamKind::Weight, random_tensor(&[kh, kh, 3, 4], 0.5, &mut rng))?;
        let probe = random_tensor(&[2, 5usize.div_ceil(stride), 6usize.div_ceil(stride), 4], 1.0, &mut rng);
        reports.push(grad_check(
            label,
            &mut s,
            |s, want| {
                let y = conv2d(s.value(x), s.value(k), stride)?;
                let (loss, dy) = probe_loss(&y, &probe);
                if want {
                    let mut dk = Tensor::zeros(s.value(k).shape());
                    let mut dx = Tensor::zeros(s.value(x).shape());
                    conv2d_backward(s.value(x), s.value(k), stride, &dy, Some(&mut dk), Some(&mut dx))?;
                    s.grads[k.index()] = dk;
                    s.grads[x.index()] = dx;
                }
                Ok(loss)
            },
            opts,
        )?);
    }

    for (label, mode) in [("batch_norm train masked", Mode::Train), ("batch_norm eval masked", Mode::Eval)] {
        let mut s = ParamStore::new();
        let x = s.add("input", ParamKind::Weight, random_tensor(&[3, 2, 5, 4], 2.0, &mut rng))?;
        let g = s.add("gamma", ParamKind::Weight, random_tensor(&[4], 1.0, &mut rng))?;
        let b = s.add("beta", ParamKind::Weight, random_tensor(&[4], 1.0, &mut rng))?;
        let mut rm = random_tensor(&[4], 0.5, &mut rng);
        let mut rv = Tensor::full(&[4], 1.3);
        let valid = [5usize, 3, 1];
        let probe = random_tensor(&[3, 2, 5, 4], 1.0, &mut rng);
        reports.push(grad_check(
            label,
            &mut s,
            |s, want| {
                let (mut rm, mut rv) = (rm.clone(), rv.clone());
                let (y, cache) = batch_norm(
                    s.value(x),
                    BnParams {
                        gamma: s.value(g),
                        beta: s.value(b),
                        running_mean: &mut rm,
                        running_var: &mut rv,
                        momentum: super::BN_MOMENTUM,
                    },
                    Some(&valid),
                    mode,
                )?;
                let (loss, dy) = probe_loss(&y, &probe);
                if want {
                    let (mut dg, mut db) = (Tensor::zeros(&[4]), Tensor::zeros(&[4]));
                    let dx = batch_norm_backward(
                        &dy,
                        s.value(g),
                        &cache,
                        Some(&valid),
                        BnGrads {
                            gamma: Some(&mut dg),
                            beta: Some(&mut db),
                        },
                    )?;
                    s.grads[x.index()] = dx;
                    s.grads[g.index()] = dg;
                    s.grads[b.index()] = db;
                }
                Ok(loss)
            },
            opts,
        )?);
        // keep the running statistics untouched between modes
        rm.fill(0.1);
        rv.fill(1.3);
    }

    {
        let mut s = ParamStore::new();
        let x = s.add("input", ParamKind::Weight, random_tensor(&[2, 3, 4, 5], 1.0, &mut rng))?;
        let w = s.add("w", ParamKind::Weight, random_tensor(&[5, 5], 0.8, &mut rng))?;
        let b = s.add("b", ParamKind::Weight, random_tensor(&[5], 0.3, &mut rng))?;
        let u = s.add("u", ParamKind::Weight, random_tensor(&[5], 1.0, &mut rng))?;
        let valid = [4usize, 2];
        let probe = random_tensor(&[2, 5], 1.0, &mut rng);
        reports.push(grad_check(
            "attention_pool masked",
            &mut s,
            |s, want| {
                let p = AttentionParams {
                    w: s.value(w),
                    b: s.value(b),
                    u: s.value(u),
                    lambda: 0.3,
                };
                let (y, cache) = attention_pool(s.value(x), &p, &valid)?;
                let (loss, dy) = probe_loss(&y, &probe);
                if want {
                    let (mut dw, mut db, mut du) = (Tensor::zeros(&[5, 5]), Tensor::zeros(&[5]), Tensor::zeros(&[5]));
                    let dx = attention_pool_backward(
                        s.value(x),
                        &p,
                        &valid,
                        &cache,
                        &dy,
                        AttentionGrads {
                            w: Some(&mut dw),
                            b: Some(&mut db),
                            u: Some(&mut du),
                        },
                    )?;
                    s.grads[x.index()] = dx;
                    s.grads[w.index()] = dw;
                    s.grads[b.index()] = db;
                    s.grads[u.index()] = du;
                }
                Ok(loss)
            },
            opts,
        )?);
    }

    {
        let mut s = ParamStore::new();
        let x = s.add("input", ParamKind::Weight, random_tensor(&[3, 6], 1.0, &mut rng))?;
        let w = s.add("w", ParamKind::Weight, random_tensor(&[6, 4], 1.0, &mut rng))?;
        let b = s.add("b", ParamKind::Weight, random_tensor(&[4], 1.0, &mut rng))?;
        let labels = [0usize, 3, 1];
        let weights = [0.5, 1.0, 2.0, 1.5];
        reports.push(grad_check(
            "dense + weighted softmax_xent",
            &mut s,
            |s, want| {
                let y = dense(s.value(x), s.value(w), s.value(b))?;
                let (loss, dy) = softmax_xent(&y, &labels, &weights)?;
                if want {
                    let (mut dw, mut db) = (Tensor::zeros(&[6, 4]), Tensor::zeros(&[4]));
                    let dx = dense_backward(s.value(x), s.value(w), &dy, Some(&mut dw), Some(&mut db))?;
                    s.grads[x.index()] = dx;
                    s.grads[w.index()] = dw;
                    s.grads[b.index()] = db;
                }
                Ok(loss)
            },
            opts,
        )?);
    }

    {
        let mut s = ParamStore::new();
        // keep values away from the ReLU kink so central differences stay on one side
        let mut init = random_tensor(&[2, 5, 7, 3], 1.0, &mut rng);
        for v in init.data_mut() {
            *v += if *v >= 0.0 { 0.05 } else { -0.05 };
        }
        let x = s.add("input", ParamKind::Weight, init)?;
        let valid = [7usize, 4];
        let probe = random_tensor(&[2, 3, 4, 6], 1.0, &mut rng);
        reports.push(grad_check(
            "relu + pooled shortcut masked",
            &mut s,
            |s, want| {
                let mut r = s.value(x).clone();
                relu(&mut r);
                let y = pooled_shortcut(&r, &valid)?;
                let (loss, dy) = probe_loss(&y, &probe);
                if want {
                    let mut dr = pooled_shortcut_backward(r.shape(), &dy, &valid);
                    relu_backward(&r, &mut dr);
                    s.grads[x.index()] = dr;
                }
                Ok(loss)
            },
            opts,
        )?);
    }

    Ok(reports)
}
