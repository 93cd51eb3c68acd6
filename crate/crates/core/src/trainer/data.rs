//! In-memory training examples: cached log-mels for clips up to 5 s, raw
//! audio for longer clips so each epoch can draw a fresh crop.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::{
    balance_subsample, class_weights_from_counts, map_labels, AvTarget, CorpusManifest, Partition, SampleRecord,
};
use crate::dsp::{center_crop_5s, crop_5s, log_mel, pad_batch, read_wav, MelSpectrogram, PaddedBatch, Waveform, CROP_SAMPLES};
use crate::error::{Error, Result};
use crate::model::DomainSpec;

#[derive(Clone, Debug)]
enum Features {
    Cached(MelSpectrogram),
    /// Longer than the crop; `eval` holds the centre crop.
    Long { audio: Waveform, eval: MelSpectrogram },
}

#[derive(Clone, Debug)]
pub struct Example {
    pub sample_id: String,
    pub label: usize,
    features: Features,
}

impl Example {
    pub fn from_waveform(sample_id: String, label: usize, audio: Waveform) -> Self {
        let features = if audio.samples.len() > CROP_SAMPLES {
            Features::Long {
                eval: log_mel(&center_crop_5s(&audio)),
                audio,
            }
        } else {
            Features::Cached(log_mel(&audio))
        };
        Example {
            sample_id,
            label,
            features,
        }
    }

    pub fn from_mel(sample_id: String, label: usize, mel: MelSpectrogram) -> Self {
        Example {
            sample_id,
            label,
            features: Features::Cached(mel),
        }
    }

    pub fn eval_features(&self) -> &MelSpectrogram {
        match &self.features {
            Features::Cached(m) | Features::Long { eval: m, .. } => m,
        }
    }

    fn train_features(&self, crop_seed: u64) -> std::borrow::Cow<'_, MelSpectrogram> {
        match &self.features {
            Features::Cached(m) => std::borrow::Cow::Borrowed(m),
            Features::Long { audio, .. } => std::borrow::Cow::Owned(log_mel(&crop_5s(audio, crop_seed))),
        }
    }
}

/// One domain's examples with its head class list.
#[derive(Clone, Debug)]
pub struct DomainData {
    pub spec: DomainSpec,
    /// Corpus each example came from (several for aggregated domains).
    pub corpora: Vec<String>,
    pub train: Vec<Example>,
    pub devel: Vec<Example>,
    pub test: Vec<Example>,
    /// Aligned with `spec.classes`.
    pub class_weights: Vec<f64>,
}

impl DomainData {
    pub fn partition(&self, p: Partition) -> &[Example] {
        match p {
            Partition::Train => &self.train,
            Partition::Devel => &self.devel,
            Partition::Test => &self.test,
        }
    }

    pub fn from_examples(spec: DomainSpec, train: Vec<Example>, devel: Vec<Example>, test: Vec<Example>) -> Result<Self> {
        let mut d = DomainData {
            class_weights: Vec::new(),
            corpora: vec![spec.id.clone()],
            spec,
            train,
            devel,
            test,
        };
        d.update_weights()?;
        Ok(d)
    }

    fn update_weights(&mut self) -> Result<()> {
        if self.train.is_empty() {
            return Err(Error::EmptyPartition(format!("{}/train", self.spec.id)));
        }
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for e in &self.train {
            *counts.entry(self.spec.classes[e.label].clone()).or_insert(0) += 1;
        }
        let w = class_weights_from_counts(&counts).expect("non-empty train");
        self.class_weights = w.aligned(&self.spec.classes);
        Ok(())
    }

    pub fn require_devel(&self) -> Result<()> {
        if self.devel.is_empty() {
            return Err(Error::EmptyPartition(format!("{}/devel", self.spec.id)));
        }
        Ok(())
    }
}

fn load_examples(
    manifest: &CorpusManifest,
    records: &[&SampleRecord],
    classes: &[String],
) -> Result<Vec<Example>> {
    records
        .iter()
        .map(|r| {
            let label = classes
                .iter()
                .position(|c| *c == r.label)
                .ok_or_else(|| Error::MalformedManifest {
                    path: manifest.base_dir.clone(),
                    message: format!("label `{}` of `{}` is not a head class", r.label, r.sample_id),
                })?;
            let audio = read_wav(&manifest.audio_path(r))?;
            Ok(Example::from_waveform(r.sample_id.clone(), label, audio))
        })
        .collect()
}

/// Reads one partition with the given head classes.
pub fn load_partition(manifest: &CorpusManifest, partition: Partition, classes: &[String]) -> Result<Vec<Example>> {
    let records: Vec<&SampleRecord> = manifest.partition(partition).collect();
    load_examples(manifest, &records, classes)
}

/// Reads every partition of `manifest` with the given head classes.
pub fn load_domain(id: &str, manifest: &CorpusManifest, classes: Vec<String>) -> Result<DomainData> {
    let mut parts = Vec::new();
    for p in Partition::ALL {
        parts.push(load_partition(manifest, p, &classes)?);
    }
    let test = parts.pop().expect("three partitions");
    let devel = parts.pop().expect("three partitions");
    let train = parts.pop().expect("three partitions");
    let mut d = DomainData::from_examples(DomainSpec::new(id, classes), train, devel, test)?;
    d.corpora = vec![manifest.corpus_id.clone()];
    Ok(d)
}

/// Categorical domain: head classes are the corpus's sorted label set.
pub fn load_categorical(manifest: &CorpusManifest) -> Result<DomainData> {
    load_domain(&manifest.corpus_id, manifest, manifest.label_space.clone())
}

/// Arousal or valence domain from one corpus, balanced per partition.
pub fn load_av(manifest: &CorpusManifest, target: AvTarget, seed: u64) -> Result<DomainData> {
    let balanced = balance_subsample(manifest, target, seed)?;
    let mapped = map_labels(&balanced, target)?;
    load_domain(&manifest.corpus_id, &mapped, target.classes())
}

/// Several corpora pooled into one arousal or valence domain.
pub fn load_aggregated(id: &str, manifests: &[CorpusManifest], target: AvTarget, seed: u64) -> Result<DomainData> {
    let mut parts = [Vec::new(), Vec::new(), Vec::new()];
    for m in manifests {
        let d = load_av(m, target, seed)?;
        parts[0].extend(d.train);
        parts[1].extend(d.devel);
        parts[2].extend(d.test);
    }
    let [train, devel, test] = parts;
    let mut d = DomainData::from_examples(DomainSpec::new(id, target.classes()), train, devel, test)?;
    d.corpora = manifests.iter().map(|m| m.corpus_id.clone()).collect();
    Ok(d)
}

/// Cycling sampler over a domain's training set: shuffles, serves batches
/// (the last one possibly short), reshuffles once exhausted.
#[derive(Clone, Debug)]
pub struct BatchStream {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
    pub passes: u64,
}

impl BatchStream {
    pub fn new(len: usize, seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        let mut order: Vec<usize> = (0..len).collect();
        order.shuffle(&mut rng);
        BatchStream {
            order,
            pos: 0,
            rng,
            passes: 0,
        }
    }

    pub fn next_batch(&mut self, batch_size: usize) -> Vec<usize> {
        if self.pos >= self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
            self.passes += 1;
        }
        let end = (self.pos + batch_size).min(self.order.len());
        let batch = self.order[self.pos..end].to_vec();
        self.pos = end;
        batch
    }

    /// One full pass as a list of batches, then the stream is exhausted.
    pub fn epoch(&mut self, batch_size: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        loop {
            out.push(self.next_batch(batch_size));
            if self.pos >= self.order.len() {
                return out;
            }
        }
    }
}

/// Mixes the run seed with per-sample coordinates into a crop seed.
pub(crate) fn crop_seed(seed: u64, pass: u64, index: usize) -> u64 {
    let mut h = seed ^ 0x9e37_79b9_7f4a_7c15;
    for v in [pass, index as u64] {
        h = (h ^ v).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 31;
    }
    h
}

pub(crate) fn train_batch(examples: &[Example], indices: &[usize], seed: u64, pass: u64) -> Result<(PaddedBatch, Vec<usize>)> {
    let feats: Vec<_> = indices
        .iter()
        .map(|&i| examples[i].train_features(crop_seed(seed, pass, i)))
        .collect();
    let refs: Vec<&MelSpectrogram> = feats.iter().map(|f| f.as_ref()).collect();
    let labels = indices.iter().map(|&i| examples[i].label).collect();
    Ok((pad_batch(&refs)?, labels))
}
