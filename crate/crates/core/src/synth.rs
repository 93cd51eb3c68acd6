//! Deterministic synthetic corpora: each class is a harmonic tone with its own
//! fundamental and amplitude-modulation rate; speakers detune the fundamental
//! and corpora shift pitch and noise level.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_manifest, CorpusManifest, Partition, SampleRecord};
use crate::dsp::{write_wav, SAMPLE_RATE};
use crate::error::{Error, Result};

/// `(label, fundamental Hz, modulation Hz)`; labels all have an
/// arousal/valence mapping.
const CLASS_TEMPLATES: [(&str, f64, f64); 8] = [
    ("anger", 100.0, 2.0),
    ("happiness", 160.0, 4.0),
    ("neutral", 250.0, 8.0),
    ("sadness", 400.0, 16.0),
    ("fear", 130.0, 12.0),
    ("boredom", 320.0, 3.0),
    ("surprise", 200.0, 6.0),
    ("tenderness", 500.0, 10.0),
];

const SPEAKER_DETUNE: f64 = 0.05;
const MODULATION_DEPTH: f64 = 0.8;
const PEAK: f64 = 0.5;
const MAX_HARMONIC_HZ: f64 = 7_000.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainShift {
    pub pitch_offset_hz: f64,
    pub snr_db: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCorpus {
    pub corpus_id: String,
    pub class_count: usize,
    pub samples_per_class: usize,
    pub speakers: usize,
    /// Seconds, `[min, max]`.
    pub duration_range: [f64; 2],
    pub domain_shift: DomainShift,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub corpora: Vec<SynthCorpus>,
}

impl SynthSpec {
    /// Three pre-training corpora and one held-out target, four classes each.
    pub fn default_fixture() -> Self {
        let corpus = |id: &str, pitch: f64, snr: f64| SynthCorpus {
            corpus_id: id.to_string(),
            class_count: 4,
            samples_per_class: 30,
            speakers: 5,
            duration_range: [1.0, 2.5],
            domain_shift: DomainShift {
                pitch_offset_hz: pitch,
                snr_db: snr,
            },
        };
        SynthSpec {
            seed: 7,
            corpora: vec![
                corpus("synth_a", 0.0, 30.0),
                corpus("synth_b", 12.0, 25.0),
                corpus("synth_c", -8.0, 28.0),
                corpus("synth_d", 6.0, 22.0),
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.corpora.is_empty() {
            return bad("synthetic spec has no corpora".into());
        }
        let mut ids: Vec<&str> = self.corpora.iter().map(|c| c.corpus_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.corpora.len() {
            return bad("corpus ids must be unique".into());
        }
        for c in &self.corpora {
            let id = &c.corpus_id;
            if id.is_empty() || id.contains(['/', '\\']) || id.chars().any(char::is_whitespace) {
                return bad(format!("invalid corpus id `{id}`"));
            }
            if !(2..=CLASS_TEMPLATES.len()).contains(&c.class_count) {
                return bad(format!("{id}: class_count must be in 2..={}", CLASS_TEMPLATES.len()));
            }
            if c.speakers < 3 {
                return bad(format!("{id}: at least 3 speakers are needed for a disjoint split"));
            }
            if c.samples_per_class < c.speakers {
                return bad(format!("{id}: samples_per_class must be at least the speaker count"));
            }
            let [lo, hi] = c.duration_range;
            if !(0.5..=12.0).contains(&lo) || !(0.5..=12.0).contains(&hi) || lo > hi {
                return bad(format!("{id}: duration range must lie in [0.5, 12] s"));
            }
            if !c.domain_shift.snr_db.is_finite() || !c.domain_shift.pitch_offset_hz.is_finite() {
                return bad(format!("{id}: domain shift must be finite"));
            }
            if CLASS_TEMPLATES[..c.class_count]
                .iter()
                .any(|t| t.1 * (1.0 - SPEAKER_DETUNE) + c.domain_shift.pitch_offset_hz < 40.0)
            {
                return bad(format!("{id}: pitch offset pushes a fundamental below 40 Hz"));
            }
        }
        Ok(())
    }
}

pub fn class_labels(count: usize) -> Vec<String> {
    CLASS_TEMPLATES[..count].iter().map(|t| t.0.to_string()).collect()
}

/// Speaker `s` of `n`: the last ~20 % go to test, the ~20 % before them to
/// devel, the rest to train.
fn speaker_partition(s: usize, n: usize) -> Partition {
    let held = (n as f64 * 0.2).round().max(1.0) as usize;
    if s >= n - held {
        Partition::Test
    } else if s >= n - 2 * held {
        Partition::Devel
    } else {
        Partition::Train
    }
}

fn render(f0: f64, am_rate: f64, seconds: f64, snr_db: f64, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let sr = SAMPLE_RATE as f64;
    let n = (seconds * sr).round() as usize;
    let harmonics = (MAX_HARMONIC_HZ / f0).floor().max(1.0) as usize;
    let phases: Vec<f64> = (0..harmonics).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
    let am_phase = rng.random_range(0.0..2.0 * PI);
    let mut x: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / sr;
            let tone: f64 = phases
                .iter()
                .enumerate()
                .map(|(h, p)| (2.0 * PI * f0 * (h + 1) as f64 * t + p).sin() / (h + 1) as f64)
                .sum();
            tone * (1.0 + MODULATION_DEPTH * (2.0 * PI * am_rate * t + am_phase).sin())
        })
        .collect();
    let power = x.iter().map(|v| v * v).sum::<f64>() / n.max(1) as f64;
    let noise_std = (power / 10f64.powf(snr_db / 10.0)).sqrt();
    let noise = Normal::new(0.0, noise_std).expect("finite std");
    for v in &mut x {
        *v += noise.sample(rng);
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    x.iter().map(|v| (v * PEAK / peak) as f32).collect()
}

#[derive(Clone, Debug)]
pub struct GeneratedCorpus {
    pub manifest_path: PathBuf,
    pub manifest: CorpusManifest,
}

/// Writes `out/<corpus>/wav/*.wav` and `out/<corpus>.csv` for every corpus.
pub fn generate(spec: &SynthSpec, out: &Path) -> Result<Vec<GeneratedCorpus>> {
    spec.validate()?;
    let mut generated = Vec::new();
    for (ci, c) in spec.corpora.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(ci as u64);
        let wav_dir = out.join(&c.corpus_id).join("wav");
        fs::create_dir_all(&wav_dir).map_err(|e| Error::io(&wav_dir, e))?;
        let detune: Vec<f64> = (0..c.speakers)
            .map(|_| 1.0 + rng.random_range(-SPEAKER_DETUNE..=SPEAKER_DETUNE))
            .collect();
        let mut records = Vec::new();
        for (k, &(label, f0, am)) in CLASS_TEMPLATES[..c.class_count].iter().enumerate() {
            for j in 0..c.samples_per_class {
                let speaker = (j + k) % c.speakers;
                let [lo, hi] = c.duration_range;
                let seconds = if hi > lo { rng.random_range(lo..=hi) } else { lo };
                let fundamental = f0 * detune[speaker] + c.domain_shift.pitch_offset_hz;
                let audio = render(fundamental, am, seconds, c.domain_shift.snr_db, &mut rng);
                let sample_id = format!("{}_{label}_{j:03}", c.corpus_id);
                let path = wav_dir.join(format!("{sample_id}.wav"));
                write_wav(&path, &audio)?;
                records.push(SampleRecord {
                    corpus_id: c.corpus_id.clone(),
                    sample_id: sample_id.clone(),
                    audio_path: format!("{}/wav/{sample_id}.wav", c.corpus_id),
                    speaker_id: format!("{}_spk{speaker}", c.corpus_id),
                    partition: speaker_partition(speaker, c.speakers),
                    label: label.to_string(),
                });
            }
        }
        let manifest = CorpusManifest::from_records(&c.corpus_id, records, out.to_path_buf())?;
        let manifest_path = out.join(format!("{}.csv", c.corpus_id));
        write_manifest(&manifest_path, &manifest)?;
        generated.push(GeneratedCorpus {
            manifest_path,
            manifest,
        });
    }
    Ok(generated)
}
