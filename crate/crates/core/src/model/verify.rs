//! Finite-difference verification of the whole network on a reduced-width
//! instance of the full topology.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{DomainSpec, Model, ModelConfig, Regime};
use crate::compute::gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
use crate::compute::layers::softmax_xent;
use crate::compute::{Mode, Tensor};
use crate::error::Result;

/// Narrow model with non-zero adapters, biases and attention vectors so every
/// path carries gradient signal.
pub fn check_model(attention_shared: bool) -> Model<f64> {
    let cfg = ModelConfig {
        stem_filters: 2,
        stack_filters: vec![4, 8, 16],
        attention_dim: 16,
        head_units: 6,
        attention_shared,
        ..ModelConfig::default()
    };
    let classes = vec!["x".into(), "y".into(), "z".into()];
    let mut m = Model::<f64>::build(cfg, &[DomainSpec::new("d", classes)], 11).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for id in m.store.ids().collect::<Vec<_>>() {
        let name = m.store.name(id).to_string();
        let range = if name.ends_with("attention.u") {
            2.0
        } else if name.contains("adapter") || name.ends_with(".beta") || name.ends_with(".b") {
            0.3
        } else {
            continue;
        };
        for v in m.store.value_mut(id).data_mut() {
            *v = rng.random_range(-range..range);
        }
    }
    m
}

/// Train-mode loss (masked batch, dropout with a fixed mask, weighted
/// cross-entropy) checked against central differences.
pub fn model_grad_check(regime: Regime, attention_shared: bool, opts: GradCheckOptions) -> Result<GradCheckReport> {
    let mut m = check_model(attention_shared);
    m.apply_regime("d", regime)?;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (t, valid) = (13, [13, 9, 6]);
    let n = valid.len() * 64 * t;
    let x = Tensor::from_vec(&[valid.len(), 64, t, 1], (0..n).map(|_| rng.random_range(-3.0..3.0)).collect())?;
    let labels = [0usize, 2, 1];
    let weights = [1.0, 0.5, 2.0];
    let Model { arch, mut store } = m;
    let label = format!(
        "model ({regime}, {} attention)",
        if attention_shared { "shared" } else { "per-domain" }
    );
    grad_check(
        &label,
        &mut store,
        |s, want| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            let (logits, tr) = arch.forward(s, "d", &x, &valid, Mode::Train, Some(&mut rng))?;
            let (loss, dl) = softmax_xent(&logits, &labels, &weights)?;
            if want {
                s.zero_grads();
                arch.backward(s, "d", &tr, &dl)?;
            }
            Ok(loss)
        },
        opts,
    )
}
