//! Named parameter storage and the momentum SGD update.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Trainable weights carry a gradient and a momentum buffer; buffers (running
/// batch-norm statistics) carry neither.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamKind {
    Weight,
    Buffer,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    pub(crate) names: Vec<String>,
    pub(crate) kinds: Vec<ParamKind>,
    pub(crate) values: Vec<Tensor<T>>,
    pub(crate) grads: Vec<Tensor<T>>,
    pub(crate) velocity: Vec<Tensor<T>>,
    pub(crate) trainable: Vec<bool>,
    index: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            names: Vec::new(),
            kinds: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
            velocity: Vec::new(),
            trainable: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::InvalidConfig(format!("parameter `{name}` defined twice")));
        }
        let id = ParamId(self.values.len());
        let (grad, velocity) = match kind {
            ParamKind::Weight => (Tensor::zeros(value.shape()), Tensor::zeros(value.shape())),
            ParamKind::Buffer => (Tensor::zeros(&[0]), Tensor::zeros(&[0])),
        };
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.kinds.push(kind);
        self.values.push(value);
        self.grads.push(grad);
        self.velocity.push(velocity);
        self.trainable.push(kind == ParamKind::Weight);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn kind(&self, id: ParamId) -> ParamKind {
        self.kinds[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &Tensor<T> {
        &self.grads[id.0]
    }

    pub fn velocity(&self, id: ParamId) -> &Tensor<T> {
        &self.velocity[id.0]
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.trainable[id.0]
    }

    /// Marks exactly the given weights as trainable.
    pub fn set_trainable(&mut self, ids: &[ParamId]) {
        self.trainable.iter_mut().for_each(|t| *t = false);
        for id in ids {
            if self.kinds[id.0] == ParamKind::Weight {
                self.trainable[id.0] = true;
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.fill(T::zero());
        }
    }

    pub fn reset_velocity(&mut self) {
        for v in &mut self.velocity {
            v.fill(T::zero());
        }
    }

    pub fn weight_count(&self, ids: impl IntoIterator<Item = ParamId>) -> usize {
        ids.into_iter()
            .filter(|id| self.kinds[id.0] == ParamKind::Weight)
            .map(|id| self.values[id.0].len())
            .sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub momentum: f64,
    pub l2: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        SgdConfig {
            momentum: 0.9,
            l2: 1e-6,
        }
    }
}

/// `v ← momentum·v + (grad + l2·param)`, `param ← param − lr·v` for every
/// trainable weight.
pub fn sgd_step<T: Real>(store: &mut ParamStore<T>, lr: f64, cfg: SgdConfig) {
    let lr = T::from_f64(lr);
    let mom = T::from_f64(cfg.momentum);
    let l2 = T::from_f64(cfg.l2);
    for i in 0..store.values.len() {
        if !store.trainable[i] || store.kinds[i] != ParamKind::Weight {
            continue;
        }
        let value = store.values[i].data_mut();
        let grad = store.grads[i].data();
        let vel = store.velocity[i].data_mut();
        for ((p, &g), v) in value.iter_mut().zip(grad).zip(vel.iter_mut()) {
            *v = mom * *v + (g + l2 * *p);
            *p -= lr * *v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_store(p: f64) -> (ParamStore<f64>, ParamId) {
        let mut s = ParamStore::new();
        let id = s.add("p", ParamKind::Weight, Tensor::full(&[1], p)).unwrap();
        (s, id)
    }

    #[test]
    fn zero_gradient_is_a_fixed_point() {
        let (mut s, id) = scalar_store(0.7);
        sgd_step(&mut s, 0.1, SgdConfig { momentum: 0.9, l2: 0.0 });
        assert_eq!(s.value(id).data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_lr_times_grad() {
        let (mut s, id) = scalar_store(2.0);
        s.grads[id.0].data_mut()[0] = 0.5;
        sgd_step(&mut s, 0.1, SgdConfig { momentum: 0.9, l2: 1e-6 });
        let expected = 2.0 - 0.1 * (0.5 + 1e-6 * 2.0);
        assert!((s.value(id).data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn quadratic_trajectory_matches_recurrence() {
        // f(p) = p², grad 2p; scalar simulation of the momentum recurrence
        let (lr, mom) = (0.1, 0.9);
        let (mut p, mut v) = (1.0f64, 0.0f64);
        let mut expected = Vec::new();
        for _ in 0..3 {
            v = mom * v + 2.0 * p;
            p -= lr * v;
            expected.push(p);
        }
        // p1 = 0.8, p2 = 0.8 - 0.1*(0.9*2 + 1.6) = 0.46, p3 = 0.46 - 0.1*(0.9*3.4 + 0.92) = 0.062
        let frozen = [0.8, 0.46, 0.062];
        for (a, b) in expected.iter().zip(frozen) {
            assert!((a - b).abs() < 1e-12);
        }

        let (mut s, id) = scalar_store(1.0);
        for want in frozen {
            s.zero_grads();
            let cur = s.value(id).data()[0];
            s.grads[id.0].data_mut()[0] = 2.0 * cur;
            sgd_step(&mut s, lr, SgdConfig { momentum: mom, l2: 0.0 });
            assert!((s.value(id).data()[0] - want).abs() < 1e-12);
        }
    }

    proptest::proptest! {
        #[test]
        fn zero_learning_rate_is_identity(
            pairs in proptest::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 1..20),
        ) {
            let (values, grads): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let mut s = ParamStore::new();
            let id = s.add("p", ParamKind::Weight, Tensor::from_vec(&[values.len()], values.clone()).unwrap()).unwrap();
            for _ in 0..3 {
                s.grads[id.0].data_mut().copy_from_slice(&grads);
                sgd_step(&mut s, 0.0, SgdConfig::default());
            }
            proptest::prop_assert_eq!(s.value(id).data(), &values[..]);
        }
    }

    #[test]
    fn frozen_weights_do_not_move() {
        let mut s = ParamStore::<f32>::new();
        let a = s.add("a", ParamKind::Weight, Tensor::full(&[2], 1.0)).unwrap();
        let b = s.add("b", ParamKind::Weight, Tensor::full(&[2], 1.0)).unwrap();
        s.grads[a.0].fill(1.0);
        s.grads[b.0].fill(1.0);
        s.set_trainable(&[a]);
        sgd_step(&mut s, 0.5, SgdConfig::default());
        assert_ne!(s.value(a).data(), &[1.0, 1.0]);
        assert_eq!(s.value(b).data(), &[1.0, 1.0]);
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("x", ParamKind::Weight, Tensor::zeros(&[1])).unwrap();
        assert!(s.add("x", ParamKind::Buffer, Tensor::zeros(&[1])).is_err());
    }
}
