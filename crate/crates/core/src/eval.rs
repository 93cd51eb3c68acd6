//! Unweighted average recall, confusion matrices, chance levels and McNemar's
//! paired test, plus side-by-side comparison reports.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{Binomial, ChiSquared, ContinuousCDF, DiscreteCDF};

use crate::error::{Error, Result};

/// χ²(1) critical value at p = 0.05.
pub const CHI2_CRITICAL_05: f64 = 3.841458820694124;
pub const ALPHA: f64 = 0.05;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    /// `counts[reference][prediction]`
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(classes: Vec<String>) -> Self {
        let k = classes.len();
        ConfusionMatrix {
            classes,
            counts: vec![vec![0; k]; k],
        }
    }

    pub fn from_indices(classes: Vec<String>, reference: &[usize], prediction: &[usize]) -> Result<Self> {
        if reference.len() != prediction.len() {
            return Err(Error::LengthMismatch(reference.len(), prediction.len()));
        }
        let mut m = ConfusionMatrix::new(classes);
        for (&r, &p) in reference.iter().zip(prediction) {
            m.add(r, p)?;
        }
        Ok(m)
    }

    pub fn add(&mut self, reference: usize, prediction: usize) -> Result<()> {
        let k = self.classes.len();
        for label in [reference, prediction] {
            if label >= k {
                return Err(Error::LabelOutOfRange { label, classes: k });
            }
        }
        self.counts[reference][prediction] += 1;
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Per-class recall; `None` for classes absent from the reference.
    pub fn recalls(&self) -> Vec<Option<f64>> {
        self.counts
            .iter()
            .enumerate()
            .map(|(i, row)| {
                let n: u64 = row.iter().sum();
                (n > 0).then(|| row[i] as f64 / n as f64)
            })
            .collect()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.classes.len()).map(|i| self.counts[i][i]).sum::<u64>() as f64 / total as f64)
    }
}

/// Mean recall over the classes present in the reference.
pub fn uar(m: &ConfusionMatrix) -> Result<f64> {
    let present: Vec<f64> = m.recalls().into_iter().flatten().collect();
    if present.is_empty() {
        return Err(Error::EmptyMatrix);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub fn chance_level(classes: usize) -> f64 {
    1.0 / classes as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "method")]
pub enum McNemarMethod {
    /// Exact binomial test when `b + c` is below the threshold, corrected χ²
    /// otherwise.
    Auto { exact_below: u64 },
    Corrected,
    Exact,
}

impl Default for McNemarMethod {
    fn default() -> Self {
        McNemarMethod::Auto { exact_below: 25 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Improvement,
    Decrease,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McNemarResult {
    /// Baseline correct, candidate wrong.
    pub b: u64,
    /// Baseline wrong, candidate correct.
    pub c: u64,
    /// Continuity-corrected χ² statistic `(|b − c| − 1)² / (b + c)`.
    pub statistic: f64,
    pub p_value: f64,
    pub exact: bool,
    pub significant_at_05: bool,
    pub direction: Direction,
}

pub fn mcnemar(baseline: &[usize], candidate: &[usize], reference: &[usize]) -> Result<McNemarResult> {
    mcnemar_with(baseline, candidate, reference, McNemarMethod::default())
}

pub fn mcnemar_with(
    baseline: &[usize],
    candidate: &[usize],
    reference: &[usize],
    method: McNemarMethod,
) -> Result<McNemarResult> {
    if baseline.len() != reference.len() {
        return Err(Error::LengthMismatch(baseline.len(), reference.len()));
    }
    if candidate.len() != reference.len() {
        return Err(Error::LengthMismatch(candidate.len(), reference.len()));
    }
    let (mut b, mut c) = (0u64, 0u64);
    for ((&x, &y), &r) in baseline.iter().zip(candidate).zip(reference) {
        match (x == r, y == r) {
            (true, false) => b += 1,
            (false, true) => c += 1,
            _ => {}
        }
    }
    Ok(mcnemar_counts(b, c, method))
}

pub fn mcnemar_counts(b: u64, c: u64, method: McNemarMethod) -> McNemarResult {
    let n = b + c;
    let statistic = if n == 0 {
        0.0
    } else {
        let d = (b as f64 - c as f64).abs() - 1.0;
        d.max(0.0).powi(2) / n as f64
    };
    let exact = match method {
        McNemarMethod::Auto { exact_below } => n < exact_below,
        McNemarMethod::Corrected => false,
        McNemarMethod::Exact => true,
    };
    let (p_value, significant) = if n == 0 {
        (1.0, false)
    } else if exact {
        let tail = Binomial::new(0.5, n).expect("valid binomial").cdf(b.min(c));
        let p = (2.0 * tail).min(1.0);
        (p, p < ALPHA)
    } else {
        let p = 1.0 - ChiSquared::new(1.0).expect("valid dof").cdf(statistic);
        (p, statistic > CHI2_CRITICAL_05)
    };
    let direction = match (significant, c.cmp(&b)) {
        (true, std::cmp::Ordering::Greater) => Direction::Improvement,
        (true, std::cmp::Ordering::Less) => Direction::Decrease,
        _ => Direction::None,
    };
    McNemarResult {
        b,
        c,
        statistic,
        p_value,
        exact,
        significant_at_05: significant,
        direction,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub corpus_id: String,
    pub partition: String,
    pub uar: f64,
    pub accuracy: f64,
    pub chance: f64,
    pub confusion: ConfusionMatrix,
    /// Recall per class; `None` where the class is absent from the reference.
    pub recalls: Vec<Option<f64>>,
    pub excluded_classes: Vec<String>,
}

impl EvalReport {
    pub fn new(corpus_id: &str, partition: &str, confusion: ConfusionMatrix) -> Result<Self> {
        let recalls = confusion.recalls();
        let excluded_classes = confusion
            .classes
            .iter()
            .zip(&recalls)
            .filter(|(_, r)| r.is_none())
            .map(|(c, _)| c.clone())
            .collect();
        Ok(EvalReport {
            corpus_id: corpus_id.to_string(),
            partition: partition.to_string(),
            uar: uar(&confusion)?,
            accuracy: confusion.accuracy().unwrap_or(0.0),
            chance: chance_level(confusion.classes.len()),
            recalls,
            excluded_classes,
            confusion,
        })
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{} / {}: UAR {:.1}%  accuracy {:.1}%  chance {:.1}%",
            self.corpus_id,
            self.partition,
            100.0 * self.uar,
            100.0 * self.accuracy,
            100.0 * self.chance
        )?;
        let width = self.confusion.classes.iter().map(String::len).max().unwrap_or(0).max(6);
        write!(f, "{:>width$}", "ref\\pred")?;
        for c in &self.confusion.classes {
            write!(f, " {c:>width$}")?;
        }
        writeln!(f, " {:>width$}", "recall")?;
        for (i, row) in self.confusion.counts.iter().enumerate() {
            write!(f, "{:>width$}", self.confusion.classes[i])?;
            for n in row {
                write!(f, " {n:>width$}")?;
            }
            match self.recalls[i] {
                Some(r) => writeln!(f, " {:>width$}", format!("{:.1}%", 100.0 * r))?,
                None => writeln!(f, " {:>width$}", "absent")?,
            }
        }
        if !self.excluded_classes.is_empty() {
            writeln!(f, "excluded from UAR: {}", self.excluded_classes.join(", "))?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub sample_id: String,
    pub reference: String,
    pub prediction: String,
}

pub fn write_predictions(path: &Path, rows: &[PredictionRow]) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.into(),
        source,
    };
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    if rows.is_empty() {
        w.write_record(["sample_id", "reference", "prediction"]).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let csv_err = |source| Error::Csv {
        path: path.into(),
        source,
    };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

/// Predictions of one run on one corpus, with the head's class list.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusPredictions {
    pub classes: Vec<String>,
    pub rows: Vec<PredictionRow>,
}

/// One run's predictions keyed by corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct RunPredictions {
    pub name: String,
    pub corpora: BTreeMap<String, CorpusPredictions>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareCell {
    pub uar: f64,
    /// `+` significant improvement, `-` significant decrease, empty otherwise.
    pub mark: String,
    pub mcnemar: McNemarResult,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareRow {
    pub corpus_id: String,
    pub chance: f64,
    pub baseline_uar: f64,
    pub candidates: Vec<CompareCell>,
    /// Set when a significant McNemar direction disagrees with the UAR
    /// ordering (possible for imbalanced test sets).
    pub disagreements: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CompareReport {
    pub baseline: String,
    pub candidates: Vec<String>,
    pub rows: Vec<CompareRow>,
}

fn class_indices(p: &CorpusPredictions, corpus: &str, run: &str) -> Result<(Vec<usize>, Vec<usize>)> {
    let index: HashMap<&str, usize> = p.classes.iter().enumerate().map(|(i, c)| (c.as_str(), i)).collect();
    let lookup = |label: &str| {
        index
            .get(label)
            .copied()
            .ok_or_else(|| Error::MisalignedRuns(format!("{run}/{corpus}: label `{label}` not among the classes")))
    };
    let mut refs = Vec::with_capacity(p.rows.len());
    let mut preds = Vec::with_capacity(p.rows.len());
    for r in &p.rows {
        refs.push(lookup(&r.reference)?);
        preds.push(lookup(&r.prediction)?);
    }
    Ok((refs, preds))
}

pub fn compare_report(baseline: &RunPredictions, candidates: &[RunPredictions]) -> Result<CompareReport> {
    compare_report_with(baseline, candidates, McNemarMethod::default())
}

pub fn compare_report_with(
    baseline: &RunPredictions,
    candidates: &[RunPredictions],
    method: McNemarMethod,
) -> Result<CompareReport> {
    let mut rows = Vec::new();
    for (corpus, base) in &baseline.corpora {
        let (refs, base_pred) = class_indices(base, corpus, &baseline.name)?;
        let base_uar = uar(&ConfusionMatrix::from_indices(base.classes.clone(), &refs, &base_pred)?)?;
        let mut cells = Vec::new();
        let mut disagreements = Vec::new();
        for cand in candidates {
            let cp = cand.corpora.get(corpus).ok_or_else(|| {
                Error::MisalignedRuns(format!("run `{}` has no predictions for `{corpus}`", cand.name))
            })?;
            if cp.classes != base.classes {
                return Err(Error::MisalignedRuns(format!(
                    "{}/{corpus}: class lists differ from the baseline",
                    cand.name
                )));
            }
            let aligned = cp.rows.len() == base.rows.len()
                && cp
                    .rows
                    .iter()
                    .zip(&base.rows)
                    .all(|(a, b)| a.sample_id == b.sample_id && a.reference == b.reference);
            if !aligned {
                return Err(Error::MisalignedRuns(format!(
                    "{}/{corpus}: sample order or references differ from the baseline",
                    cand.name
                )));
            }
            let (_, pred) = class_indices(cp, corpus, &cand.name)?;
            let cand_uar = uar(&ConfusionMatrix::from_indices(cp.classes.clone(), &refs, &pred)?)?;
            let test = mcnemar_with(&base_pred, &pred, &refs, method)?;
            let mark = match test.direction {
                Direction::Improvement => "+",
                Direction::Decrease => "-",
                Direction::None => "",
            };
            let contradicts = match test.direction {
                Direction::Improvement => cand_uar < base_uar,
                Direction::Decrease => cand_uar > base_uar,
                Direction::None => false,
            };
            if contradicts {
                disagreements.push(cand.name.clone());
            }
            cells.push(CompareCell {
                uar: cand_uar,
                mark: mark.to_string(),
                mcnemar: test,
            });
        }
        rows.push(CompareRow {
            corpus_id: corpus.clone(),
            chance: chance_level(base.classes.len()),
            baseline_uar: base_uar,
            candidates: cells,
            disagreements,
        });
    }
    Ok(CompareReport {
        baseline: baseline.name.clone(),
        candidates: candidates.iter().map(|c| c.name.clone()).collect(),
        rows,
    })
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name_w = self.rows.iter().map(|r| r.corpus_id.len()).max().unwrap_or(0).max(6);
        let col = |s: &str| s.len().max(8);
        write!(f, "{:<name_w$} {:>7} {:>w$}", "corpus", "chance", self.baseline, w = col(&self.baseline))?;
        for c in &self.candidates {
            write!(f, " {:>w$}", c, w = col(c) + 1)?;
        }
        writeln!(f)?;
        for r in &self.rows {
            write!(
                f,
                "{:<name_w$} {:>7.1} {:>w$.1}",
                r.corpus_id,
                100.0 * r.chance,
                100.0 * r.baseline_uar,
                w = col(&self.baseline)
            )?;
            for (cell, name) in r.candidates.iter().zip(&self.candidates) {
                let mark = if cell.mark.is_empty() { " " } else { &cell.mark };
                write!(f, " {:>w$}", format!("{:.1}{mark}", 100.0 * cell.uar), w = col(name) + 1)?;
            }
            writeln!(f)?;
        }
        writeln!(f, "UAR in %; +/- mark a McNemar difference from the baseline at p < 0.05.")?;
        let notes: Vec<String> = self
            .rows
            .iter()
            .filter(|r| !r.disagreements.is_empty())
            .map(|r| format!("{} ({})", r.corpus_id, r.disagreements.join(", ")))
            .collect();
        if !notes.is_empty() {
            writeln!(
                f,
                "McNemar direction and UAR ordering disagree for: {}; error proportions and mean recall weigh imbalanced classes differently.",
                notes.join("; ")
            )?;
        }
        Ok(())
    }
}
