//! Corpus manifests, arousal/valence label mapping, balanced subsampling and
//! class weighting.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_COLUMNS: [&str; 6] = ["corpus", "sample_id", "path", "speaker", "partition", "label"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Partition {
    Train,
    Devel,
    Test,
}

impl Partition {
    pub const ALL: [Partition; 3] = [Partition::Train, Partition::Devel, Partition::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Partition::Train => "train",
            Partition::Devel => "devel",
            Partition::Test => "test",
        }
    }
}

impl fmt::Display for Partition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Partition {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim() {
            "train" => Ok(Partition::Train),
            "devel" => Ok(Partition::Devel),
            "test" => Ok(Partition::Test),
            other => Err(other.to_string()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SampleRecord {
    pub corpus_id: String,
    pub sample_id: String,
    pub audio_path: String,
    pub speaker_id: String,
    pub partition: Partition,
    pub label: String,
}

pub fn normalize_label(label: &str) -> String {
    label.trim().to_lowercase()
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub corpus_id: String,
    pub records: Vec<SampleRecord>,
    /// Sorted distinct labels.
    pub label_space: Vec<String>,
    pub speaker_sets: BTreeMap<Partition, BTreeSet<String>>,
    /// Directory against which relative audio paths resolve.
    pub base_dir: PathBuf,
    pub warnings: Vec<String>,
}

impl CorpusManifest {
    /// Validates records and derives label space, speaker sets and overlap
    /// warnings.
    pub fn from_records(corpus_id: &str, records: Vec<SampleRecord>, base_dir: PathBuf) -> Result<Self> {
        let mut seen = HashSet::new();
        for r in &records {
            if !seen.insert(r.sample_id.as_str()) {
                return Err(Error::DuplicateSampleId {
                    corpus: corpus_id.to_string(),
                    sample_id: r.sample_id.clone(),
                });
            }
            if r.label.is_empty() {
                return Err(Error::MalformedManifest {
                    path: base_dir.clone(),
                    message: format!("sample `{}` has an empty label", r.sample_id),
                });
            }
        }
        let label_space: Vec<String> = records
            .iter()
            .map(|r| r.label.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let mut speaker_sets: BTreeMap<Partition, BTreeSet<String>> = BTreeMap::new();
        for r in &records {
            speaker_sets.entry(r.partition).or_default().insert(r.speaker_id.clone());
        }
        let mut warnings = Vec::new();
        for (i, a) in Partition::ALL.iter().enumerate() {
            for b in &Partition::ALL[i + 1..] {
                if let (Some(sa), Some(sb)) = (speaker_sets.get(a), speaker_sets.get(b)) {
                    let shared: Vec<&String> = sa.intersection(sb).collect();
                    if !shared.is_empty() {
                        warnings.push(format!(
                            "corpus {corpus_id}: {} speaker(s) shared between {a} and {b} (e.g. `{}`)",
                            shared.len(),
                            shared[0]
                        ));
                    }
                }
            }
        }
        Ok(CorpusManifest {
            corpus_id: corpus_id.to_string(),
            records,
            label_space,
            speaker_sets,
            base_dir,
            warnings,
        })
    }

    pub fn partition(&self, p: Partition) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.partition == p)
    }

    pub fn audio_path(&self, record: &SampleRecord) -> PathBuf {
        let p = Path::new(&record.audio_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn class_counts(&self, p: Partition) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for r in self.partition(p) {
            *counts.entry(r.label.clone()).or_insert(0) += 1;
        }
        counts
    }
}

#[derive(Debug, Deserialize, Serialize)]
struct ManifestRow {
    corpus: String,
    sample_id: String,
    path: String,
    speaker: String,
    partition: String,
    label: String,
}

pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let csv_err = |source| Error::Csv {
        path: path.into(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(_) => match e.into_kind() {
                csv::ErrorKind::Io(io) => Error::io(path, io),
                _ => unreachable!(),
            },
            _ => csv_err(e),
        })?;
    let headers = reader.headers().map_err(csv_err)?.clone();
    for col in MANIFEST_COLUMNS {
        if !headers.iter().any(|h| h == col) {
            return Err(Error::MissingColumn(path.into(), col.to_string()));
        }
    }
    let mut records = Vec::new();
    let mut corpus_id: Option<String> = None;
    for (i, row) in reader.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(csv_err)?;
        let line = i + 2;
        let partition = row.partition.parse::<Partition>().map_err(|value| Error::UnknownPartition {
            path: path.into(),
            line,
            value,
        })?;
        match &corpus_id {
            None => corpus_id = Some(row.corpus.clone()),
            Some(c) if *c != row.corpus => {
                return Err(Error::MalformedManifest {
                    path: path.into(),
                    message: format!("line {line}: corpus `{}` differs from `{c}`", row.corpus),
                })
            }
            _ => {}
        }
        let label = normalize_label(&row.label);
        if label.is_empty() {
            return Err(Error::MalformedManifest {
                path: path.into(),
                message: format!("line {line}: empty label"),
            });
        }
        records.push(SampleRecord {
            corpus_id: row.corpus,
            sample_id: row.sample_id,
            audio_path: row.path,
            speaker_id: row.speaker,
            partition,
            label,
        });
    }
    let corpus_id = corpus_id.ok_or_else(|| Error::EmptyManifest(path.into()))?;
    let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
    CorpusManifest::from_records(&corpus_id, records, base_dir)
}

pub fn write_manifest(path: &Path, manifest: &CorpusManifest) -> Result<()> {
    let csv_err = |source| Error::Csv {
        path: path.into(),
        source,
    };
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    for r in &manifest.records {
        w.serialize(ManifestRow {
            corpus: r.corpus_id.clone(),
            sample_id: r.sample_id.clone(),
            path: r.audio_path.clone(),
            speaker: r.speaker_id.clone(),
            partition: r.partition.to_string(),
            label: r.label.clone(),
        })
        .map_err(csv_err)?;
    }
    if manifest.records.is_empty() {
        w.write_record(MANIFEST_COLUMNS).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arousal {
    Low,
    High,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Valence {
    Negative,
    Neutral,
    Positive,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AvLabel {
    pub arousal: Arousal,
    pub valence: Valence,
}

use Arousal::{High, Low};
use Valence::{Negative, Neutral, Positive};

/// Category → (arousal, valence) cells.
const AV_TABLE: &[(Arousal, Valence, &[&str])] = &[
    (
        Low,
        Negative,
        &[
            "contempt",
            "disappointment",
            "disgust",
            "frustration",
            "guilt",
            "hurt",
            "impatience",
            "irritation",
            "jealousy",
            "sadness",
            "shame",
            "unfriendliness",
            "worry",
        ],
    ),
    (Low, Neutral, &["boredom", "confusion", "neutral", "pondering", "rest", "sneakiness"]),
    (Low, Positive, &["admiration", "kindness", "pride", "relief", "tenderness"]),
    (
        High,
        Negative,
        &[
            "aggressiveness",
            "anger",
            "anxiety",
            "despair",
            "fear",
            "helplessness",
            "high-stress",
            "scream",
        ],
    ),
    (
        High,
        Neutral,
        &["emphatic", "interest", "intoxication", "medium-stress", "nervousness", "surprise"],
    ),
    (
        High,
        Positive,
        &[
            "amusement",
            "cheerfulness",
            "elation",
            "excitement",
            "happiness",
            "joking",
            "joy",
            "pleasure",
            "positive",
        ],
    ),
];

pub fn av_categories() -> impl Iterator<Item = (&'static str, AvLabel)> {
    AV_TABLE.iter().flat_map(|(a, v, cats)| {
        cats.iter().map(move |c| {
            (
                *c,
                AvLabel {
                    arousal: *a,
                    valence: *v,
                },
            )
        })
    })
}

pub fn map_to_av(label: &str) -> Result<AvLabel> {
    let key = normalize_label(label);
    av_categories()
        .find(|(c, _)| *c == key)
        .map(|(_, av)| av)
        .ok_or(Error::UnmappedLabel(key))
}

/// `category<TAB>arousal<TAB>valence`, one line per category.
pub fn av_table_tsv() -> String {
    let mut out = String::new();
    for (c, av) in av_categories() {
        let a = match av.arousal {
            Low => "low",
            High => "high",
        };
        let v = match av.valence {
            Negative => "negative",
            Neutral => "neutral",
            Positive => "positive",
        };
        out.push_str(&format!("{c}\t{a}\t{v}\n"));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AvTarget {
    Arousal,
    Valence,
}

impl AvTarget {
    /// Class names in head order.
    pub fn classes(self) -> Vec<String> {
        match self {
            AvTarget::Arousal => vec!["low".into(), "high".into()],
            AvTarget::Valence => vec!["negative".into(), "neutral".into(), "positive".into()],
        }
    }

    pub fn class_of(self, label: &str) -> Result<String> {
        let av = map_to_av(label)?;
        let name = match self {
            AvTarget::Arousal => match av.arousal {
                Low => "low",
                High => "high",
            },
            AvTarget::Valence => match av.valence {
                Negative => "negative",
                Neutral => "neutral",
                Positive => "positive",
            },
        };
        Ok(name.to_string())
    }
}

impl FromStr for AvTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "arousal" => Ok(AvTarget::Arousal),
            "valence" => Ok(AvTarget::Valence),
            other => Err(Error::InvalidConfig(format!("unknown AV target `{other}`"))),
        }
    }
}

/// Replaces categorical labels with their arousal or valence class names.
pub fn map_labels(manifest: &CorpusManifest, target: AvTarget) -> Result<CorpusManifest> {
    let records = manifest
        .records
        .iter()
        .map(|r| {
            Ok(SampleRecord {
                label: target.class_of(&r.label)?,
                ..r.clone()
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = CorpusManifest::from_records(&manifest.corpus_id, records, manifest.base_dir.clone())?;
    out.warnings = manifest.warnings.clone();
    Ok(out)
}

/// Per partition, keeps `min_c n_c` samples of every mapped class (seeded
/// uniform sampling without replacement). Labels are left untouched; a mapped
/// class missing from a partition empties that partition with a warning.
pub fn balance_subsample(manifest: &CorpusManifest, target: AvTarget, seed: u64) -> Result<CorpusManifest> {
    let mapped: Vec<String> = manifest
        .records
        .iter()
        .map(|r| target.class_of(&r.label))
        .collect::<Result<_>>()?;
    let classes = target.classes();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; manifest.records.len()];
    let mut warnings = manifest.warnings.clone();
    for p in Partition::ALL {
        let members: Vec<Vec<usize>> = classes
            .iter()
            .map(|c| {
                (0..manifest.records.len())
                    .filter(|&i| manifest.records[i].partition == p && mapped[i] == *c)
                    .collect()
            })
            .collect();
        let total: usize = members.iter().map(Vec::len).sum();
        if total == 0 {
            continue;
        }
        let quota = members.iter().map(Vec::len).min().unwrap_or(0);
        if quota == 0 {
            let missing: Vec<&str> = classes
                .iter()
                .zip(&members)
                .filter(|(_, m)| m.is_empty())
                .map(|(c, _)| c.as_str())
                .collect();
            warnings.push(format!(
                "corpus {}: {p} has no `{}` samples; partition dropped by balancing",
                manifest.corpus_id,
                missing.join("`, `")
            ));
            continue;
        }
        for m in &members {
            for j in sample(&mut rng, m.len(), quota).into_iter() {
                keep[m[j]] = true;
            }
        }
    }
    let records = manifest
        .records
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(r, _)| r.clone())
        .collect();
    let mut out = CorpusManifest::from_records(&manifest.corpus_id, records, manifest.base_dir.clone())?;
    out.warnings = warnings;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub weights: BTreeMap<String, f64>,
}

impl ClassWeights {
    pub fn get(&self, label: &str) -> Option<f64> {
        self.weights.get(label).copied()
    }

    /// Weights aligned to a head's class order; classes absent from the
    /// partition get weight 1.
    pub fn aligned(&self, classes: &[String]) -> Vec<f64> {
        classes.iter().map(|c| self.get(c).unwrap_or(1.0)).collect()
    }

    pub fn uniform(classes: &[String]) -> Self {
        ClassWeights {
            weights: classes.iter().map(|c| (c.clone(), 1.0)).collect(),
        }
    }
}

/// Balanced inverse frequency `N / (K · n_c)` over the classes present in the
/// partition.
pub fn class_weights(manifest: &CorpusManifest, partition: Partition) -> Result<ClassWeights> {
    class_weights_from_counts(&manifest.class_counts(partition))
        .ok_or_else(|| Error::EmptyPartition(format!("{}/{partition}", manifest.corpus_id)))
}

pub fn class_weights_from_counts(counts: &BTreeMap<String, usize>) -> Option<ClassWeights> {
    let n: usize = counts.values().sum();
    if n == 0 {
        return None;
    }
    let k = counts.values().filter(|&&c| c > 0).count() as f64;
    Some(ClassWeights {
        weights: counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .map(|(l, &c)| (l.clone(), n as f64 / (k * c as f64)))
            .collect(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CorpusSummary {
    pub corpus_id: String,
    pub samples: usize,
    pub classes: usize,
    pub speakers: usize,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub total_hours: f64,
    pub missing_durations: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct InspectReport {
    pub corpora: Vec<CorpusSummary>,
    /// Pooled duration counts in 1 s bins over [0, 10) s.
    pub histogram: [usize; 10],
    /// Pooled samples of 10 s or longer.
    pub overflow: usize,
    pub total_samples: usize,
    pub total_hours: f64,
}

pub fn inspect(manifests: &[CorpusManifest], durations: &HashMap<(String, String), f64>) -> InspectReport {
    let mut report = InspectReport {
        corpora: Vec::new(),
        histogram: [0; 10],
        overflow: 0,
        total_samples: 0,
        total_hours: 0.0,
    };
    for m in manifests {
        if m.records.is_empty() {
            continue;
        }
        let mut known = Vec::new();
        let mut missing = 0;
        for r in &m.records {
            match durations.get(&(m.corpus_id.clone(), r.sample_id.clone())) {
                Some(&d) => known.push(d),
                None => missing += 1,
            }
        }
        let total: f64 = known.iter().sum();
        let mean = if known.is_empty() { 0.0 } else { total / known.len() as f64 };
        let var = if known.is_empty() {
            0.0
        } else {
            known.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / known.len() as f64
        };
        for &d in &known {
            let bin = d.max(0.0).floor() as usize;
            if bin < 10 {
                report.histogram[bin] += 1;
            } else {
                report.overflow += 1;
            }
        }
        let speakers: BTreeSet<&str> = m.records.iter().map(|r| r.speaker_id.as_str()).collect();
        report.total_samples += m.records.len();
        report.total_hours += total / 3600.0;
        report.corpora.push(CorpusSummary {
            corpus_id: m.corpus_id.clone(),
            samples: m.records.len(),
            classes: m.label_space.len(),
            speakers: speakers.len(),
            mean_seconds: mean,
            std_seconds: var.sqrt(),
            total_hours: total / 3600.0,
            missing_durations: missing,
        });
    }
    report
}

impl fmt::Display for InspectReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>8} {:>5} {:>5} {:>16} {:>9} {:>8}",
            "corpus", "samples", "C.", "Sp.", "duration (s)", "hours", "missing"
        )?;
        for c in &self.corpora {
            writeln!(
                f,
                "{:<16} {:>8} {:>5} {:>5} {:>16} {:>9.3} {:>8}",
                c.corpus_id,
                c.samples,
                c.classes,
                c.speakers,
                format!("{:.2} ± {:.2}", c.mean_seconds, c.std_seconds),
                c.total_hours,
                if c.missing_durations > 0 {
                    format!("{}!", c.missing_durations)
                } else {
                    "0".into()
                }
            )?;
        }
        writeln!(f, "total: {} samples, {:.3} h", self.total_samples, self.total_hours)?;
        write!(f, "duration histogram (1 s bins):")?;
        for (i, n) in self.histogram.iter().enumerate() {
            write!(f, " [{i}-{}):{n}", i + 1)?;
        }
        writeln!(f, " [10+):{}", self.overflow)
    }
}
