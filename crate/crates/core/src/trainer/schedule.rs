//! Learning-rate ladders, per-step decay, the patience automaton and the
//! round-robin plan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Regime;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayLaw {
    /// `lr / (1 + decay · t)`
    InverseTime,
    /// `lr · exp(−decay · t)`
    Exponential,
}

pub const DEFAULT_DECAY: f64 = 1e-6;

pub fn effective_lr(stage_lr: f64, step: u64) -> f64 {
    effective_lr_with(stage_lr, step, DEFAULT_DECAY, DecayLaw::InverseTime)
}

pub fn effective_lr_with(stage_lr: f64, step: u64, decay: f64, law: DecayLaw) -> f64 {
    match law {
        DecayLaw::InverseTime => stage_lr / (1.0 + decay * step as f64),
        DecayLaw::Exponential => stage_lr * (-decay * step as f64).exp(),
    }
}

pub fn default_ladder(regime: Regime) -> Vec<f64> {
    match regime {
        Regime::HeadOnly | Regime::FullFinetune => vec![0.01, 0.001],
        Regime::Scratch | Regime::Adapters | Regime::MultiDomain => vec![0.1, 0.01, 0.001],
    }
}

pub fn validate_ladder(lrs: &[f64]) -> Result<()> {
    if lrs.is_empty() || lrs.iter().any(|lr| !lr.is_finite() || *lr <= 0.0) {
        return Err(Error::InvalidConfig(format!("learning-rate ladder {lrs:?} must be positive")));
    }
    for w in lrs.windows(2) {
        if ((w[0] / w[1]) - 10.0).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "learning-rate ladder {lrs:?} must fall by a factor of 10 per stage"
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EpochOutcome {
    Improved,
    Stale,
    /// Patience ran out and the next (smaller) learning rate takes over.
    NextStage,
    Stop,
}

/// Patience bookkeeping over devel UAR. Epochs are numbered from 1.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EarlyStopState {
    pub best_uar: f64,
    pub best_epoch: usize,
    pub epochs_since_improve: usize,
    pub stage_index: usize,
    pub stages: usize,
    pub patience: usize,
}

impl EarlyStopState {
    pub fn new(stages: usize, patience: usize) -> Self {
        EarlyStopState {
            best_uar: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_improve: 0,
            stage_index: 0,
            stages,
            patience,
        }
    }

    pub fn observe(&mut self, epoch: usize, devel_uar: f64) -> EpochOutcome {
        if devel_uar > self.best_uar {
            self.best_uar = devel_uar;
            self.best_epoch = epoch;
            self.epochs_since_improve = 0;
            return EpochOutcome::Improved;
        }
        self.epochs_since_improve += 1;
        if self.epochs_since_improve < self.patience {
            return EpochOutcome::Stale;
        }
        self.epochs_since_improve = 0;
        if self.stage_index + 1 < self.stages {
            self.stage_index += 1;
            EpochOutcome::NextStage
        } else {
            EpochOutcome::Stop
        }
    }
}

/// Fixed-length multi-domain schedule: each round visits every domain once.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRobinPlan {
    pub domains: Vec<String>,
    pub stage_lrs: Vec<f64>,
    pub rounds_per_stage: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PlannedStep {
    pub round: u64,
    pub domain: usize,
    pub stage: usize,
    pub stage_lr: f64,
}

impl RoundRobinPlan {
    pub fn total_rounds(&self) -> u64 {
        self.rounds_per_stage * self.stage_lrs.len() as u64
    }

    pub fn stage_of(&self, round: u64) -> usize {
        ((round / self.rounds_per_stage.max(1)) as usize).min(self.stage_lrs.len() - 1)
    }

    /// Every optimizer step in execution order.
    pub fn steps(&self) -> impl Iterator<Item = PlannedStep> + '_ {
        (0..self.total_rounds()).flat_map(move |round| {
            let stage = self.stage_of(round);
            (0..self.domains.len()).map(move |domain| PlannedStep {
                round,
                domain,
                stage,
                stage_lr: self.stage_lrs[stage],
            })
        })
    }
}
