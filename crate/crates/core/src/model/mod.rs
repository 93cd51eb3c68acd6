//! Residual CNN with per-domain parallel adapters, batch norms, attention
//! pooling and classifier heads on top of a shared convolutional backbone.

mod checkpoint;
mod network;
mod verify;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::compute::{Mode, ParamId, ParamKind, ParamStore, Real, Tensor};
use crate::dsp::PaddedBatch;
use crate::error::{Error, Result};

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, ParamEntry, RngState, CHECKPOINT_VERSION};
pub use network::Trace;
pub use verify::{check_model, model_grad_check};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub mel_bands: usize,
    pub stem_filters: usize,
    pub stack_filters: Vec<usize>,
    pub blocks_per_stack: usize,
    pub attention_dim: usize,
    pub attention_lambda: f64,
    pub head_units: usize,
    pub dropout_rate: f64,
    pub attention_shared: bool,
    pub stem_adapter: bool,
    /// Weight kept by the batch-norm running statistics per update.
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            mel_bands: 64,
            stem_filters: 32,
            stack_filters: vec![64, 128, 256],
            blocks_per_stack: 2,
            attention_dim: 256,
            attention_lambda: 0.3,
            head_units: 64,
            dropout_rate: 0.5,
            attention_shared: true,
            stem_adapter: true,
            bn_momentum: crate::compute::BN_MOMENTUM,
        }
    }
}

impl ModelConfig {
    /// Small network with the same topology, for fixtures and gradient checks.
    pub fn toy() -> Self {
        ModelConfig {
            stem_filters: 8,
            stack_filters: vec![16, 32, 64],
            attention_dim: 64,
            head_units: 32,
            ..ModelConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.mel_bands == 0 || self.stem_filters == 0 || self.head_units == 0 {
            return bad("mel_bands, stem_filters and head_units must be positive".into());
        }
        if self.stack_filters.is_empty() || self.blocks_per_stack == 0 {
            return bad("at least one stack with one block is required".into());
        }
        let mut prev = self.stem_filters;
        for &f in &self.stack_filters {
            if f != 2 * prev {
                return bad(format!(
                    "stack_filters must double from stem_filters={}: got {:?}",
                    self.stem_filters, self.stack_filters
                ));
            }
            prev = f;
        }
        if self.attention_dim != prev {
            return bad(format!("attention_dim {} must equal the last stack's {prev} filters", self.attention_dim));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        if !self.attention_lambda.is_finite() || self.attention_lambda <= 0.0 {
            return bad("attention_lambda must be positive".into());
        }
        if !(0.0..1.0).contains(&self.bn_momentum) {
            return bad(format!("bn_momentum {} outside [0, 1)", self.bn_momentum));
        }
        Ok(())
    }

    pub fn conv_count(&self) -> usize {
        1 + 2 * self.blocks_per_stack * self.stack_filters.len()
    }

    pub fn downsampling(&self) -> usize {
        1 << self.stack_filters.len()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub id: String,
    pub classes: Vec<String>,
}

impl DomainSpec {
    pub fn new(id: impl Into<String>, classes: Vec<String>) -> Self {
        DomainSpec { id: id.into(), classes }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Scratch,
    FullFinetune,
    HeadOnly,
    Adapters,
    MultiDomain,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Scratch => "scratch",
            Regime::FullFinetune => "full_finetune",
            Regime::HeadOnly => "head_only",
            Regime::Adapters => "adapters",
            Regime::MultiDomain => "multi_domain",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scratch" => Ok(Regime::Scratch),
            "full_finetune" => Ok(Regime::FullFinetune),
            "head_only" => Ok(Regime::HeadOnly),
            "adapters" => Ok(Regime::Adapters),
            "multi_domain" => Ok(Regime::MultiDomain),
            other => Err(Error::UnknownRegime(other.to_string())),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvIds {
    pub kernel: ParamId,
    pub adapter: Option<ParamId>,
    pub stride: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct BnIds {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub mean: ParamId,
    pub var: ParamId,
}

#[derive(Clone, Debug)]
pub(crate) struct BlockIds {
    pub conv1: ConvIds,
    pub bn1: BnIds,
    pub conv2: ConvIds,
    pub bn2: BnIds,
    pub shortcut: bool,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct AttentionIds {
    pub w: ParamId,
    pub b: ParamId,
    pub u: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct HeadIds {
    pub w1: ParamId,
    pub bn: BnIds,
    pub w2: ParamId,
    pub b2: ParamId,
}

/// Resolved parameter handles for one domain's forward path.
#[derive(Clone, Debug)]
pub(crate) struct DomainView {
    pub spec: DomainSpec,
    pub stem: ConvIds,
    pub stem_bn: BnIds,
    pub blocks: Vec<BlockIds>,
    pub final_bn: BnIds,
    pub attention: AttentionIds,
    pub head: HeadIds,
    /// Every parameter owned by this domain, in creation order.
    pub owned: Vec<ParamId>,
}

impl DomainView {
    fn adapters(&self) -> impl Iterator<Item = ParamId> + '_ {
        std::iter::once(self.stem.adapter)
            .chain(self.blocks.iter().flat_map(|b| [b.conv1.adapter, b.conv2.adapter]))
            .flatten()
    }

    fn bns(&self) -> impl Iterator<Item = BnIds> + '_ {
        std::iter::once(self.stem_bn)
            .chain(self.blocks.iter().flat_map(|b| [b.bn1, b.bn2]))
            .chain([self.final_bn, self.head.bn])
    }

    fn head_weights(&self) -> [ParamId; 5] {
        let h = &self.head;
        [h.w1, h.bn.gamma, h.bn.beta, h.w2, h.b2]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamPartition {
    pub shared: Vec<String>,
    pub domains: IndexMap<String, Vec<String>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    /// Trainable weights in the shared backbone (and shared attention).
    pub shared: usize,
    /// Trainable weights per domain (adapters, BN affine, head, attention if
    /// per domain), taken from the first domain.
    pub per_domain: usize,
    /// All trainable weights in the model.
    pub total: usize,
    /// Running-statistic buffers in the model.
    pub buffers: usize,
}

/// Topology and parameter handles, independent of numeric precision.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub init_seed: u64,
    pub(crate) domains: IndexMap<String, DomainView>,
    pub(crate) shared: Vec<ParamId>,
    shared_convs: Vec<(ParamId, usize)>,
    shared_attention: Option<AttentionIds>,
}

#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Draws from N(0, std²) with a stream keyed by the parameter name, so the
/// initial value of a parameter depends only on the seed and its name.
fn normal_init<T: Real>(seed: u64, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name));
    let dist = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| T::from_f64(dist.sample(&mut rng))).collect())
        .expect("shape and length agree")
}

fn he_normal<T: Real>(seed: u64, name: &str, shape: &[usize]) -> Tensor<T> {
    let fan_in: usize = shape[..shape.len() - 1].iter().product();
    normal_init(seed, name, shape, (2.0 / fan_in as f64).sqrt())
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    seed: u64,
    owned: Vec<ParamId>,
}

impl<T: Real> Builder<'_, T> {
    fn add(&mut self, name: String, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let id = self.store.add(name, kind, value)?;
        self.owned.push(id);
        Ok(id)
    }

    fn he(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        let v = he_normal(self.seed, &name, shape);
        self.add(name, ParamKind::Weight, v)
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> Result<ParamId> {
        self.add(name, ParamKind::Weight, Tensor::zeros(shape))
    }

    fn bn(&mut self, prefix: &str, c: usize) -> Result<BnIds> {
        Ok(BnIds {
            gamma: self.add(format!("{prefix}.gamma"), ParamKind::Weight, Tensor::full(&[c], T::one()))?,
            beta: self.zeros(format!("{prefix}.beta"), &[c])?,
            mean: self.add(format!("{prefix}.mean"), ParamKind::Buffer, Tensor::zeros(&[c]))?,
            var: self.add(format!("{prefix}.var"), ParamKind::Buffer, Tensor::full(&[c], T::one()))?,
        })
    }

    fn attention(&mut self, prefix: &str, c: usize, d: usize) -> Result<AttentionIds> {
        let u_name = format!("{prefix}.u");
        let u = normal_init(self.seed, &u_name, &[d], (1.0 / d as f64).sqrt());
        Ok(AttentionIds {
            w: self.he(format!("{prefix}.w"), &[c, d])?,
            b: self.zeros(format!("{prefix}.b"), &[d])?,
            u: self.add(u_name, ParamKind::Weight, u)?,
        })
    }
}

fn conv_shapes(config: &ModelConfig) -> Vec<([usize; 4], usize)> {
    let mut shapes = vec![([3, 3, 1, config.stem_filters], 1)];
    let mut cin = config.stem_filters;
    for &f in &config.stack_filters {
        for b in 0..config.blocks_per_stack {
            let stride = if b == 0 { 2 } else { 1 };
            shapes.push(([3, 3, cin, f], stride));
            shapes.push(([3, 3, f, f], 1));
            cin = f;
        }
    }
    shapes
}

fn shared_conv_name(i: usize, config: &ModelConfig) -> String {
    if i == 0 {
        return "shared/stem.conv".into();
    }
    let j = i - 1;
    let per_stack = 2 * config.blocks_per_stack;
    format!("shared/stack{}.block{}.conv{}", j / per_stack, (j % per_stack) / 2, j % 2 + 1)
}

impl Architecture {
    fn new<T: Real>(config: ModelConfig, init_seed: u64, store: &mut ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store,
            seed: init_seed,
            owned: Vec::new(),
        };
        let mut shared_convs = Vec::new();
        for (i, (shape, stride)) in conv_shapes(&config).into_iter().enumerate() {
            shared_convs.push((b.he(shared_conv_name(i, &config), &shape)?, stride));
        }
        let last = *config.stack_filters.last().expect("validated");
        let shared_attention = if config.attention_shared {
            Some(b.attention("shared/attention", last, config.attention_dim)?)
        } else {
            None
        };
        Ok(Architecture {
            shared: b.owned,
            config,
            init_seed,
            domains: IndexMap::new(),
            shared_convs,
            shared_attention,
        })
    }

    fn add_domain<T: Real>(&mut self, spec: DomainSpec, store: &mut ParamStore<T>) -> Result<()> {
        if self.domains.contains_key(&spec.id) {
            return Err(Error::DuplicateDomain(spec.id));
        }
        if spec.id.is_empty() || spec.id.contains('/') || spec.id.chars().any(char::is_whitespace) {
            return Err(Error::InvalidConfig(format!("invalid domain id `{}`", spec.id)));
        }
        if spec.classes.len() < 2 {
            return Err(Error::InvalidConfig(format!("domain `{}` needs at least 2 classes", spec.id)));
        }
        let cfg = &self.config;
        let p = format!("domain/{}/", spec.id);
        let mut b = Builder {
            store,
            seed: self.init_seed,
            owned: Vec::new(),
        };
        let shapes = conv_shapes(cfg);
        let conv = |b: &mut Builder<'_, T>, i: usize, name: String, with_adapter: bool| -> Result<ConvIds> {
            let ([_, _, cin, cout], stride) = shapes[i];
            let adapter = if with_adapter {
                Some(b.zeros(name, &[1, 1, cin, cout])?)
            } else {
                None
            };
            Ok(ConvIds {
                kernel: self.shared_convs[i].0,
                adapter,
                stride,
            })
        };
        let stem = conv(&mut b, 0, format!("{p}stem.adapter"), cfg.stem_adapter)?;
        let stem_bn = b.bn(&format!("{p}stem.bn"), cfg.stem_filters)?;
        let mut blocks = Vec::new();
        let mut i = 1;
        for (s, &f) in cfg.stack_filters.iter().enumerate() {
            for k in 0..cfg.blocks_per_stack {
                let q = format!("{p}stack{s}.block{k}");
                let conv1 = conv(&mut b, i, format!("{q}.adapter1"), true)?;
                let bn1 = b.bn(&format!("{q}.bn1"), f)?;
                let conv2 = conv(&mut b, i + 1, format!("{q}.adapter2"), true)?;
                let bn2 = b.bn(&format!("{q}.bn2"), f)?;
                blocks.push(BlockIds {
                    conv1,
                    bn1,
                    conv2,
                    bn2,
                    shortcut: k == 0,
                });
                i += 2;
            }
        }
        let last = *cfg.stack_filters.last().expect("validated");
        let final_bn = b.bn(&format!("{p}final.bn"), last)?;
        let attention = match self.shared_attention {
            Some(a) => a,
            None => b.attention(&format!("{p}attention"), last, cfg.attention_dim)?,
        };
        let head = HeadIds {
            w1: b.he(format!("{p}head.dense.w"), &[last, cfg.head_units])?,
            bn: b.bn(&format!("{p}head.bn"), cfg.head_units)?,
            w2: b.he(format!("{p}head.out.w"), &[cfg.head_units, spec.classes.len()])?,
            b2: b.zeros(format!("{p}head.out.b"), &[spec.classes.len()])?,
        };
        let view = DomainView {
            spec,
            stem,
            stem_bn,
            blocks,
            final_bn,
            attention,
            head,
            owned: b.owned,
        };
        self.domains.insert(view.spec.id.clone(), view);
        Ok(())
    }

    pub(crate) fn view(&self, domain: &str) -> Result<&DomainView> {
        self.domains
            .get(domain)
            .ok_or_else(|| Error::UnknownDomain(domain.to_string()))
    }

    pub fn domains(&self) -> impl Iterator<Item = &DomainSpec> {
        self.domains.values().map(|v| &v.spec)
    }

    pub fn domain(&self, id: &str) -> Result<&DomainSpec> {
        self.view(id).map(|v| &v.spec)
    }

    /// Trainable weights for `domain` under `regime`.
    pub fn trainable_ids(&self, domain: &str, regime: Regime) -> Result<Vec<ParamId>> {
        let v = self.view(domain)?;
        let mut ids: Vec<ParamId> = match regime {
            Regime::Scratch | Regime::FullFinetune | Regime::MultiDomain => {
                self.shared.iter().chain(&v.owned).copied().collect()
            }
            Regime::HeadOnly => v.head_weights().to_vec(),
            Regime::Adapters => {
                let mut ids: Vec<ParamId> = v.adapters().collect();
                for bn in v.bns() {
                    ids.extend([bn.gamma, bn.beta]);
                }
                ids.extend(v.head_weights());
                if self.shared_attention.is_none() {
                    ids.extend([v.attention.w, v.attention.b, v.attention.u]);
                }
                ids
            }
        };
        ids.sort_by_key(|id| id.index());
        ids.dedup();
        Ok(ids)
    }
}

impl<T: Real> Model<T> {
    pub fn build(config: ModelConfig, domains: &[DomainSpec], seed: u64) -> Result<Self> {
        if domains.is_empty() {
            return Err(Error::InvalidConfig("a model needs at least one domain".into()));
        }
        let mut store = ParamStore::new();
        let mut arch = Architecture::new(config, seed, &mut store)?;
        for d in domains {
            arch.add_domain(d.clone(), &mut store)?;
        }
        Ok(Model { arch, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    /// Registers a fresh domain: zero adapters, He-normal head. Batch-norm
    /// state (and per-domain attention) is copied from `bn_source` when given.
    pub fn add_domain(&mut self, spec: DomainSpec, bn_source: Option<&str>) -> Result<()> {
        let id = spec.id.clone();
        if let Some(src) = bn_source {
            self.arch.view(src)?;
        }
        self.arch.add_domain(spec, &mut self.store)?;
        let Some(src) = bn_source else {
            return Ok(());
        };
        let (from, to) = (self.arch.view(src)?.clone(), self.arch.view(&id)?.clone());
        let mut pairs: Vec<(ParamId, ParamId)> = Vec::new();
        for (a, b) in from.bns().zip(to.bns()).take(to.bns().count() - 1) {
            pairs.extend([(a.gamma, b.gamma), (a.beta, b.beta), (a.mean, b.mean), (a.var, b.var)]);
        }
        if self.arch.shared_attention.is_none() {
            let (a, b) = (from.attention, to.attention);
            pairs.extend([(a.w, b.w), (a.b, b.b), (a.u, b.u)]);
        }
        for (a, b) in pairs {
            let v = self.store.value(a).clone();
            *self.store.value_mut(b) = v;
        }
        Ok(())
    }

    /// Takes the domain's adapters out of its forward path. Their parameters
    /// stay in the store.
    pub fn strip_adapters(&mut self, id: &str) -> Result<()> {
        let view = self
            .arch
            .domains
            .get_mut(id)
            .ok_or_else(|| Error::UnknownDomain(id.to_string()))?;
        view.stem.adapter = None;
        for b in &mut view.blocks {
            b.conv1.adapter = None;
            b.conv2.adapter = None;
        }
        Ok(())
    }

    /// Zeroes the domain's adapters and draws a fresh head, keeping its
    /// batch-norm statistics elsewhere.
    pub fn reset_domain(&mut self, id: &str, seed: u64) -> Result<()> {
        let view = self.arch.view(id)?.clone();
        for a in view.adapters() {
            self.store.value_mut(a).data_mut().fill(T::zero());
        }
        let h = view.head;
        for w in [h.w1, h.w2] {
            let name = self.store.name(w).to_string();
            let shape = self.store.value(w).shape().to_vec();
            *self.store.value_mut(w) = he_normal(seed, &name, &shape);
        }
        for (id, v) in [(h.b2, 0.0), (h.bn.gamma, 1.0), (h.bn.beta, 0.0), (h.bn.mean, 0.0), (h.bn.var, 1.0)] {
            self.store.value_mut(id).data_mut().fill(T::from_f64(v));
        }
        Ok(())
    }

    pub fn partition(&self) -> ParamPartition {
        let names = |ids: &[ParamId]| ids.iter().map(|&id| self.store.name(id).to_string()).collect();
        ParamPartition {
            shared: names(&self.arch.shared),
            domains: self
                .arch
                .domains
                .iter()
                .map(|(k, v)| (k.clone(), names(&v.owned)))
                .collect(),
        }
    }

    pub fn param_counts(&self) -> ParamCounts {
        let shared = self.store.weight_count(self.arch.shared.iter().copied());
        let per_domain = self
            .arch
            .domains
            .values()
            .next()
            .map(|v| self.store.weight_count(v.owned.iter().copied()))
            .unwrap_or(0);
        let total = self.store.weight_count(self.store.ids());
        let buffers = self
            .store
            .ids()
            .filter(|&id| self.store.kind(id) == ParamKind::Buffer)
            .map(|id| self.store.value(id).len())
            .sum();
        ParamCounts {
            shared,
            per_domain,
            total,
            buffers,
        }
    }

    pub fn trainable_set(&self, domain: &str, regime: Regime) -> Result<BTreeSet<String>> {
        Ok(self
            .arch
            .trainable_ids(domain, regime)?
            .into_iter()
            .map(|id| self.store.name(id).to_string())
            .collect())
    }

    /// Marks exactly the regime's parameters trainable.
    pub fn apply_regime(&mut self, domain: &str, regime: Regime) -> Result<()> {
        let ids = self.arch.trainable_ids(domain, regime)?;
        self.store.set_trainable(&ids);
        Ok(())
    }

    pub fn forward(
        &mut self,
        domain: &str,
        input: &Tensor<T>,
        valid: &[usize],
        mode: Mode,
        rng: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor<T>, Trace<T>)> {
        self.arch.forward(&mut self.store, domain, input, valid, mode, rng)
    }

    pub fn backward(&mut self, domain: &str, trace: &Trace<T>, dlogits: &Tensor<T>) -> Result<()> {
        self.arch.backward(&mut self.store, domain, trace, dlogits)
    }

    /// Eval-mode logits for a padded batch.
    pub fn predict(&mut self, domain: &str, batch: &PaddedBatch) -> Result<Tensor<T>> {
        let input = batch.tensor.cast::<T>();
        Ok(self.forward(domain, &input, &batch.valid_frames, Mode::Eval, None)?.0)
    }

    pub fn cast<U: Real>(&self) -> Model<U> {
        let mut store = ParamStore::new();
        for id in self.store.ids() {
            store
                .add(self.store.name(id), self.store.kind(id), self.store.value(id).cast::<U>())
                .expect("names are unique");
        }
        Model {
            arch: self.arch.clone(),
            store,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn domains(n: usize, k: usize) -> Vec<DomainSpec> {
        (0..n).map(|i| DomainSpec::new(format!("d{i}"), classes(k))).collect()
    }

    /// Closed-form weight count for the default topology.
    fn counted(cfg: &ModelConfig, k: usize) -> (usize, usize) {
        let mut shared = 9 * cfg.stem_filters;
        let mut adapters = cfg.stem_filters;
        let mut bn = 2 * cfg.stem_filters;
        let mut cin = cfg.stem_filters;
        for &f in &cfg.stack_filters {
            for _ in 0..cfg.blocks_per_stack {
                shared += 9 * cin * f + 9 * f * f;
                adapters += cin * f + f * f;
                bn += 4 * f;
                cin = f;
            }
        }
        bn += 2 * cin;
        let attention = cin * cfg.attention_dim + 2 * cfg.attention_dim;
        let head = cin * cfg.head_units + 2 * cfg.head_units + cfg.head_units * k + k;
        (shared + attention, adapters + bn + head)
    }

    #[test]
    fn default_parameter_budget() {
        let cfg = ModelConfig::default();
        let m = Model::<f32>::build(cfg.clone(), &domains(1, 7), 0).unwrap();
        let c = m.param_counts();
        let (shared, domain) = counted(&cfg, 7);
        assert_eq!((c.shared, c.per_domain), (shared, domain));
        assert_eq!(c.total, shared + domain);
        assert!((2.6e6..=3.4e6).contains(&(c.total as f64)), "{}", c.total);
        assert!((2.7e5..=3.3e5).contains(&(c.per_domain as f64)), "{}", c.per_domain);
    }

    #[test]
    fn many_domains_stay_compact() {
        let one = Model::<f32>::build(ModelConfig::default(), &domains(1, 7), 0).unwrap();
        let many = Model::<f32>::build(ModelConfig::default(), &domains(26, 7), 0).unwrap();
        let ratio = many.param_counts().total as f64 / one.param_counts().total as f64;
        assert!((3.0..=4.0).contains(&ratio), "{ratio}");
    }

    #[test]
    fn adapters_and_partition_cover() {
        let m = Model::<f32>::build(ModelConfig::toy(), &domains(2, 3), 1).unwrap();
        let v = m.arch.view("d0").unwrap();
        assert_eq!(v.adapters().count(), m.config().conv_count());
        assert_eq!(m.config().conv_count(), 13);
        let p = m.partition();
        let mut all: Vec<&String> = p.shared.iter().chain(p.domains.values().flatten()).collect();
        let n = all.len();
        all.sort();
        all.dedup();
        assert_eq!(all.len(), n);
        assert_eq!(n, m.store.len());
        for id in m.store.ids() {
            if m.store.name(id).contains(".adapter") {
                assert!(m.store.value(id).data().iter().all(|&x| x == 0.0));
            }
        }
    }

    #[test]
    fn regime_nesting() {
        let m = Model::<f32>::build(ModelConfig::default(), &domains(1, 7), 0).unwrap();
        let head = m.trainable_set("d0", Regime::HeadOnly).unwrap();
        let ad = m.trainable_set("d0", Regime::Adapters).unwrap();
        let full = m.trainable_set("d0", Regime::Scratch).unwrap();
        assert!(head.is_subset(&ad) && ad.is_subset(&full));
        assert!(ad.iter().all(|n| !n.starts_with("shared/")));
        let count = |s: &BTreeSet<String>| {
            m.store
                .weight_count(s.iter().filter(|n| !n.contains("head.out")).map(|n| m.store.id(n).unwrap()))
        };
        let ratio = count(&ad) as f64 / count(&full) as f64;
        assert!((ratio - 0.1).abs() <= 0.05, "{ratio}");
        assert!(matches!("frozen".parse::<Regime>(), Err(Error::UnknownRegime(_))));
    }

    #[test]
    fn duplicate_and_unknown_domains() {
        assert!(matches!(
            Model::<f32>::build(ModelConfig::toy(), &[DomainSpec::new("a", classes(2)), DomainSpec::new("a", classes(3))], 0),
            Err(Error::DuplicateDomain(_))
        ));
        let m = Model::<f32>::build(ModelConfig::toy(), &domains(1, 2), 0).unwrap();
        assert!(matches!(m.trainable_set("zz", Regime::Scratch), Err(Error::UnknownDomain(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::toy();
        c.stack_filters = vec![16, 24, 64];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.attention_dim = 32;
        assert!(c.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn init_depends_on_name_only() {
        let a = Model::<f32>::build(ModelConfig::toy(), &domains(1, 4), 5).unwrap();
        let b = Model::<f32>::build(ModelConfig::toy(), &domains(3, 4), 5).unwrap();
        for id in a.store.ids() {
            let other = b.store.id(a.store.name(id)).unwrap();
            assert_eq!(a.store.value(id), b.store.value(other));
        }
    }
}
