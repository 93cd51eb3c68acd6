//! Single-corpus training with patience-driven learning-rate stages,
//! round-robin multi-domain training and transfer to new corpora.

mod data;
mod schedule;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::compute::layers::{argmax, softmax_xent};
use crate::compute::{sgd_step, Mode, SgdConfig};
use crate::corpus::Partition;
use crate::dsp::{pad_batch, MelSpectrogram};
use crate::error::{Error, Result};
use crate::eval::{ConfusionMatrix, EvalReport, PredictionRow};
use crate::model::{save_checkpoint, DomainSpec, Model, Regime};

pub use data::{
    load_aggregated, load_av, load_categorical, load_domain, load_partition, BatchStream, DomainData, Example,
};
pub use schedule::{
    default_ladder, effective_lr, effective_lr_with, validate_ladder, DecayLaw, EarlyStopState, EpochOutcome,
    PlannedStep, RoundRobinPlan, DEFAULT_DECAY,
};

pub const THREADS_ENV: &str = "EMONET_THREADS";

const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;
const ROUND_ROBIN_STREAM_BASE: u64 = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub batch_size: usize,
    pub momentum: f64,
    /// Weight decay: `l2 · w` is added to every weight gradient.
    pub l2: f64,
    /// Learning rate per stage; the regime's ladder when absent.
    pub stage_lrs: Option<Vec<f64>>,
    pub patience: usize,
    pub rounds_per_stage: u64,
    pub decay: f64,
    pub decay_law: DecayLaw,
    pub eval_every_rounds: u64,
    pub max_epochs: Option<usize>,
    /// Write measured wall time into the history (zero otherwise, which keeps
    /// histories byte-comparable across runs).
    pub record_wall_clock: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            batch_size: 64,
            momentum: 0.9,
            l2: 1e-6,
            stage_lrs: None,
            patience: 50,
            rounds_per_stage: 2500,
            decay: DEFAULT_DECAY,
            decay_law: DecayLaw::InverseTime,
            eval_every_rounds: 250,
            max_epochs: None,
            record_wall_clock: true,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.l2 >= 0.0 && self.decay >= 0.0) {
            return bad("l2 and decay must be non-negative");
        }
        if self.patience == 0 || self.rounds_per_stage == 0 || self.eval_every_rounds == 0 {
            return bad("patience, rounds_per_stage and eval_every_rounds must be positive");
        }
        if let Some(l) = &self.stage_lrs {
            validate_ladder(l)?;
        }
        Ok(())
    }

    pub fn ladder(&self, regime: Regime) -> Vec<f64> {
        self.stage_lrs.clone().unwrap_or_else(|| default_ladder(regime))
    }

    fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            l2: self.l2,
        }
    }
}

/// Thread cap from the environment (defaults to 1).
pub fn thread_budget() -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// Epoch (single-corpus) or round (round-robin), from 1.
    pub step: u64,
    pub stage: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub devel_uar: Option<f64>,
    pub wall_ms: u64,
    pub threads: usize,
}

struct HistoryLog {
    file: Option<BufWriter<File>>,
    path: std::path::PathBuf,
    records: Vec<HistoryRecord>,
    start: Instant,
    wall_clock: bool,
    threads: usize,
}

impl HistoryLog {
    fn new(out: Option<&Path>, wall_clock: bool) -> Result<Self> {
        let path = out.map(|d| d.join("history.jsonl")).unwrap_or_default();
        let file = match out {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                Some(BufWriter::new(File::create(&path).map_err(|e| Error::io(&path, e))?))
            }
            None => None,
        };
        Ok(HistoryLog {
            file,
            path,
            records: Vec::new(),
            start: Instant::now(),
            wall_clock,
            threads: thread_budget(),
        })
    }

    fn push(&mut self, step: u64, stage: usize, lr: f64, train_loss: f64, devel_uar: Option<f64>) -> Result<()> {
        let rec = HistoryRecord {
            step,
            stage,
            lr,
            train_loss,
            devel_uar,
            wall_ms: if self.wall_clock {
                self.start.elapsed().as_millis() as u64
            } else {
                0
            },
            threads: self.threads,
        };
        if let Some(f) = &mut self.file {
            let line = serde_json::to_string(&rec).map_err(|source| Error::Json {
                path: self.path.clone(),
                source,
            })?;
            writeln!(f, "{line}")
                .and_then(|_| f.flush())
                .map_err(|e| Error::io(&self.path, e))?;
        }
        self.records.push(rec);
        Ok(())
    }
}

struct Optimizer {
    sgd: SgdConfig,
    decay: f64,
    law: DecayLaw,
    dropout: ChaCha8Rng,
    steps: u64,
}

impl Optimizer {
    fn new(cfg: &ScheduleConfig, seed: u64) -> Self {
        let mut dropout = ChaCha8Rng::seed_from_u64(seed);
        dropout.set_stream(DROPOUT_STREAM);
        Optimizer {
            sgd: cfg.sgd(),
            decay: cfg.decay,
            law: cfg.decay_law,
            dropout,
            steps: 0,
        }
    }

    /// Forward, backward and one SGD update on a batch; returns the loss.
    #[allow(clippy::too_many_arguments)]
    fn step(
        &mut self,
        model: &mut Model,
        data: &DomainData,
        indices: &[usize],
        crop_seed: u64,
        pass: u64,
        stage_lr: f64,
        decay_step: u64,
    ) -> Result<(f64, f64)> {
        let lr = effective_lr_with(stage_lr, decay_step, self.decay, self.law);
        let (batch, labels) = data::train_batch(&data.train, indices, crop_seed, pass)?;
        let id = &data.spec.id;
        let (logits, trace) = model.forward(id, &batch.tensor, &batch.valid_frames, Mode::Train, Some(&mut self.dropout))?;
        let (loss, dlogits) = softmax_xent(&logits, &labels, &data.class_weights)?;
        if !loss.is_finite() {
            return Err(Error::DivergedLoss {
                step: self.steps,
                lr,
                detail: format!("loss {loss} on domain `{id}` (batch of {})", labels.len()),
            });
        }
        model.store.zero_grads();
        model.backward(id, &trace, &dlogits)?;
        sgd_step(&mut model.store, lr, self.sgd);
        if let Some(id) = model.store.ids().find(|&p| {
            model.store.is_trainable(p) && model.store.value(p).data().iter().any(|v| !v.is_finite())
        }) {
            return Err(Error::DivergedLoss {
                step: self.steps,
                lr,
                detail: format!("non-finite value in `{}` after the update", model.store.name(id)),
            });
        }
        self.steps += 1;
        Ok((loss, lr))
    }
}

/// Eval-mode predictions on a list of examples, in order.
pub fn predict(model: &mut Model, domain: &str, examples: &[Example], batch_size: usize) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(batch_size.max(1)) {
        let feats: Vec<&MelSpectrogram> = chunk.iter().map(Example::eval_features).collect();
        let batch = pad_batch(&feats)?;
        let logits = model.predict(domain, &batch)?;
        let k = logits.dim(1);
        out.extend(logits.data().chunks_exact(k).map(argmax));
    }
    Ok(out)
}

pub fn evaluate(
    model: &mut Model,
    data: &DomainData,
    partition: Partition,
    batch_size: usize,
) -> Result<(EvalReport, Vec<PredictionRow>)> {
    evaluate_examples(model, &data.spec, data.partition(partition), partition, batch_size)
}

/// Confusion-based report and per-sample predictions for `spec`'s head.
pub fn evaluate_examples(
    model: &mut Model,
    spec: &DomainSpec,
    examples: &[Example],
    partition: Partition,
    batch_size: usize,
) -> Result<(EvalReport, Vec<PredictionRow>)> {
    if examples.is_empty() {
        return Err(Error::EmptyPartition(format!("{}/{partition}", spec.id)));
    }
    let preds = predict(model, &spec.id, examples, batch_size)?;
    let refs: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let confusion = ConfusionMatrix::from_indices(spec.classes.clone(), &refs, &preds)?;
    let report = EvalReport::new(&spec.id, partition.as_str(), confusion)?;
    let rows = examples
        .iter()
        .zip(&preds)
        .map(|(e, &p)| PredictionRow {
            sample_id: e.sample_id.clone(),
            reference: spec.classes[e.label].clone(),
            prediction: spec.classes[p].clone(),
        })
        .collect();
    Ok((report, rows))
}

pub struct SingleOutcome {
    /// Parameters at the epoch with the best devel UAR.
    pub best: Model,
    pub best_epoch: usize,
    pub best_devel_uar: f64,
    pub final_devel_uar: f64,
    pub epochs: usize,
    pub history: Vec<HistoryRecord>,
}

/// Trains `data.spec.id` until the patience automaton stops (or
/// `max_epochs`). Writes `best/`, `final/` and `history.jsonl` under `out`.
pub fn train_single(
    model: &mut Model,
    data: &DomainData,
    regime: Regime,
    cfg: &ScheduleConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<SingleOutcome> {
    cfg.validate()?;
    data.require_devel()?;
    let ladder = cfg.ladder(regime);
    validate_ladder(&ladder)?;
    model.apply_regime(&data.spec.id, regime)?;
    model.store.reset_velocity();
    let mut stream = BatchStream::new(data.train.len(), seed, SHUFFLE_STREAM);
    let mut opt = Optimizer::new(cfg, seed);
    let mut stop = EarlyStopState::new(ladder.len(), cfg.patience);
    let mut log = HistoryLog::new(out, cfg.record_wall_clock)?;
    let mut best = model.clone();
    let mut last_uar;
    let mut epoch = 0;
    loop {
        epoch += 1;
        let stage = stop.stage_index;
        let pass = stream.passes;
        let (mut loss_sum, mut n, mut lr) = (0.0, 0usize, ladder[stage]);
        for batch in stream.epoch(cfg.batch_size) {
            let (loss, used) = opt.step(model, data, &batch, seed, pass, ladder[stage], opt.steps)?;
            loss_sum += loss * batch.len() as f64;
            n += batch.len();
            lr = used;
        }
        let (report, _) = evaluate(model, data, Partition::Devel, cfg.batch_size)?;
        last_uar = report.uar;
        log.push(epoch as u64, stage, lr, loss_sum / n as f64, Some(report.uar))?;
        let outcome = stop.observe(epoch, report.uar);
        if outcome == EpochOutcome::Improved {
            best = model.clone();
        }
        if outcome == EpochOutcome::Stop || cfg.max_epochs.is_some_and(|m| epoch >= m) {
            break;
        }
    }
    if let Some(dir) = out {
        let info = |kind: &str, e: usize, uar: f64| {
            serde_json::json!({
                "kind": kind,
                "regime": regime,
                "domain": data.spec.id,
                "epoch": e,
                "devel_uar": uar,
                "seed": seed,
            })
        };
        save_checkpoint(&best, &dir.join("best"), None, info("best", stop.best_epoch, stop.best_uar))?;
        save_checkpoint(model, &dir.join("final"), Some(&opt.dropout), info("final", epoch, last_uar))?;
    }
    Ok(SingleOutcome {
        best,
        best_epoch: stop.best_epoch,
        best_devel_uar: stop.best_uar,
        final_devel_uar: last_uar,
        epochs: epoch,
        history: log.records,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiTarget {
    Categorical,
    Arousal,
    Valence,
    /// Two aggregated domains, one per dimension.
    Av,
}

impl std::str::FromStr for MultiTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "categorical" => Ok(MultiTarget::Categorical),
            "arousal" => Ok(MultiTarget::Arousal),
            "valence" => Ok(MultiTarget::Valence),
            "av" | "arousal+valence" => Ok(MultiTarget::Av),
            other => Err(Error::InvalidConfig(format!("unknown multi-domain target `{other}`"))),
        }
    }
}

pub struct RoundRobinOutcome {
    pub rounds: u64,
    pub history: Vec<HistoryRecord>,
    /// Batches drawn per domain, in domain order.
    pub batches_per_domain: Vec<u64>,
}

pub fn domain_specs(domains: &[DomainData]) -> Vec<DomainSpec> {
    domains.iter().map(|d| d.spec.clone()).collect()
}

/// Fixed-length schedule: every round draws one batch per domain and updates
/// the shared weights plus that domain's modules. Writes `shared/` and
/// `history.jsonl` under `out`.
pub fn train_round_robin(
    model: &mut Model,
    domains: &[DomainData],
    target: MultiTarget,
    cfg: &ScheduleConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<RoundRobinOutcome> {
    cfg.validate()?;
    if target == MultiTarget::Categorical && domains.len() < 2 {
        return Err(Error::SingleDomainCategorical);
    }
    if domains.is_empty() {
        return Err(Error::InvalidConfig("no domains to train".into()));
    }
    for d in domains {
        model.arch.domain(&d.spec.id)?;
    }
    let plan = RoundRobinPlan {
        domains: domains.iter().map(|d| d.spec.id.clone()).collect(),
        stage_lrs: cfg.ladder(Regime::MultiDomain),
        rounds_per_stage: cfg.rounds_per_stage,
    };
    validate_ladder(&plan.stage_lrs)?;
    model.store.reset_velocity();
    let mut streams: Vec<BatchStream> = domains
        .iter()
        .enumerate()
        .map(|(i, d)| BatchStream::new(d.train.len(), seed, ROUND_ROBIN_STREAM_BASE + i as u64))
        .collect();
    let mut drawn = vec![0u64; domains.len()];
    let mut opt = Optimizer::new(cfg, seed);
    let mut log = HistoryLog::new(out, cfg.record_wall_clock)?;
    let total = plan.total_rounds();
    let mut loss_sum = 0.0;
    for step in plan.steps() {
        let d = &domains[step.domain];
        model.apply_regime(&d.spec.id, Regime::MultiDomain)?;
        let stream = &mut streams[step.domain];
        let batch = stream.next_batch(cfg.batch_size);
        let pass = stream.passes;
        let (loss, used) = opt.step(model, d, &batch, seed, pass, step.stage_lr, step.round)?;
        drawn[step.domain] += 1;
        loss_sum += loss;
        if step.domain + 1 == domains.len() {
            let round = step.round + 1;
            let devel_uar = if round % cfg.eval_every_rounds == 0 || round == total {
                let mut sum = 0.0;
                let mut n = 0;
                for d in domains.iter().filter(|d| !d.devel.is_empty()) {
                    sum += evaluate(model, d, Partition::Devel, cfg.batch_size)?.0.uar;
                    n += 1;
                }
                (n > 0).then(|| sum / n as f64)
            } else {
                None
            };
            log.push(round, step.stage, used, loss_sum / domains.len() as f64, devel_uar)?;
            loss_sum = 0.0;
        }
    }
    if let Some(dir) = out {
        let info = serde_json::json!({
            "kind": "shared",
            "target": target,
            "rounds": total,
            "domains": plan.domains,
            "seed": seed,
        });
        save_checkpoint(model, &dir.join("shared"), Some(&opt.dropout), info)?;
    }
    Ok(RoundRobinOutcome {
        rounds: total,
        history: log.records,
        batches_per_domain: drawn,
    })
}

/// Trains `target`'s modules on a pre-trained model under `regime`. A domain
/// already present with the same classes is finetuned further (or reset to
/// zero adapters and a new head when `reinit` is set); otherwise fresh
/// modules are added with batch-norm state copied from the first domain.
/// Returns the (possibly renamed) target data and the training outcome.
pub fn transfer(
    model: &mut Model,
    target: &DomainData,
    regime: Regime,
    reinit: bool,
    cfg: &ScheduleConfig,
    seed: u64,
    out: Option<&Path>,
) -> Result<(DomainData, SingleOutcome)> {
    if !matches!(regime, Regime::Adapters | Regime::HeadOnly | Regime::FullFinetune) {
        return Err(Error::InvalidConfig(format!("`{regime}` is not a transfer regime")));
    }
    let mut data = target.clone();
    let existing = model.arch.domain(&target.spec.id).ok().cloned();
    match existing {
        Some(spec) if spec.classes == target.spec.classes => {
            if reinit {
                model.reset_domain(&spec.id, seed)?;
            }
        }
        Some(spec) => {
            data.spec.id = format!("{}.transfer", spec.id);
            model.add_domain(data.spec.clone(), Some(&spec.id))?;
        }
        None => {
            let source = model
                .arch
                .domains()
                .next()
                .map(|d| d.id.clone())
                .ok_or_else(|| Error::InvalidConfig("pre-trained model has no domains".into()))?;
            model.add_domain(data.spec.clone(), Some(&source))?;
        }
    }
    let outcome = train_single(model, &data, regime, cfg, seed, out)?;
    Ok((data, outcome))
}
