//! Checkpoint directories: `meta.json` plus `params.bin` holding every
//! parameter as concatenated little-endian f32.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Architecture, DomainSpec, Model, ModelConfig};
use crate::compute::{ParamKind, ParamStore, Real, Tensor};
use crate::dsp::FrontendSettings;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const META: &str = "meta.json";
const PARAMS: &str = "params.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    /// Byte offset into `params.bin`.
    pub offset: usize,
}

/// ChaCha8 generator position, enough to resume the exact stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        RngState {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Option<ChaCha8Rng> {
        use rand::SeedableRng;
        if self.seed.len() != 64 {
            return None;
        }
        let mut seed = [0u8; 32];
        for (i, b) in seed.iter_mut().enumerate() {
            *b = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).ok()?;
        }
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos.parse().ok()?);
        Some(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub config: ModelConfig,
    pub init_seed: u64,
    pub domains: Vec<DomainSpec>,
    pub params: Vec<ParamEntry>,
    pub rng: Option<RngState>,
    pub frontend: FrontendSettings,
    /// Free-form run information (epoch, regime, scores).
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub fn save_checkpoint<T: Real>(
    model: &Model<T>,
    dir: &Path,
    rng: Option<&ChaCha8Rng>,
    extra: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut bytes = Vec::new();
    let mut params = Vec::new();
    for id in model.store.ids() {
        let value = model.store.value(id);
        params.push(ParamEntry {
            name: model.store.name(id).to_string(),
            kind: model.store.kind(id),
            shape: value.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in value.data() {
            bytes.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
        }
    }
    let meta = CheckpointMeta {
        format_version: CHECKPOINT_VERSION,
        config: model.arch.config.clone(),
        init_seed: model.arch.init_seed,
        domains: model.arch.domains().cloned().collect(),
        params,
        rng: rng.map(RngState::capture),
        frontend: FrontendSettings::default(),
        extra,
    };
    let meta_path = dir.join(META);
    let json = serde_json::to_vec_pretty(&meta).map_err(|source| Error::Json {
        path: meta_path.clone(),
        source,
    })?;
    fs::write(&meta_path, json).map_err(|e| Error::io(&meta_path, e))?;
    let params_path = dir.join(PARAMS);
    fs::write(&params_path, bytes).map_err(|e| Error::io(&params_path, e))
}

pub fn load_checkpoint<T: Real>(dir: &Path) -> Result<(Model<T>, CheckpointMeta)> {
    let meta_path = dir.join(META);
    let corrupt = |message: String| Error::CorruptCheckpoint {
        path: dir.to_path_buf(),
        message,
    };
    let text = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let raw: serde_json::Value = serde_json::from_slice(&text).map_err(|e| corrupt(format!("meta.json: {e}")))?;
    let found = raw
        .get("format_version")
        .and_then(serde_json::Value::as_u64)
        .ok_or_else(|| corrupt("meta.json lacks format_version".into()))? as u32;
    if found != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch {
            path: dir.to_path_buf(),
            found,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta: CheckpointMeta = serde_json::from_value(raw).map_err(|e| corrupt(format!("meta.json: {e}")))?;
    let params_path = dir.join(PARAMS);
    let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;

    let mut store = ParamStore::new();
    let mut arch = Architecture::new(meta.config.clone(), meta.init_seed, &mut store)?;
    for d in &meta.domains {
        arch.add_domain(d.clone(), &mut store)?;
    }
    if meta.params.len() != store.len() {
        return Err(corrupt(format!(
            "manifest lists {} parameters, configuration defines {}",
            meta.params.len(),
            store.len()
        )));
    }
    let expected: usize = meta.params.iter().map(|p| 4 * p.shape.iter().product::<usize>()).sum();
    if bytes.len() != expected {
        return Err(corrupt(format!("params.bin has {} bytes, manifest needs {expected}", bytes.len())));
    }
    for entry in &meta.params {
        let id = store
            .id(&entry.name)
            .ok_or_else(|| corrupt(format!("unknown parameter `{}`", entry.name)))?;
        if store.value(id).shape() != entry.shape.as_slice() || store.kind(id) != entry.kind {
            return Err(corrupt(format!("parameter `{}` has shape {:?}", entry.name, entry.shape)));
        }
        let n = 4 * store.value(id).len();
        let chunk = bytes
            .get(entry.offset..entry.offset + n)
            .ok_or_else(|| corrupt(format!("parameter `{}` runs past the end of params.bin", entry.name)))?;
        let values = chunk
            .chunks_exact(4)
            .map(|c| T::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        *store.value_mut(id) = Tensor::from_vec(&entry.shape, values)?;
    }
    Ok((Model { arch, store }, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compute::Mode;
    use rand::{Rng, SeedableRng};

    fn model() -> Model<f32> {
        let mut m = Model::<f32>::build(
            ModelConfig::toy(),
            &[DomainSpec::new("d", vec!["a".into(), "b".into(), "c".into()])],
            8,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for id in m.store.ids().collect::<Vec<_>>() {
            for v in m.store.value_mut(id).data_mut() {
                *v += rng.random_range(-0.01f32..0.01);
            }
        }
        m
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let _: u64 = rng.random();
        save_checkpoint(&m, &dir.path().join("a"), Some(&rng), serde_json::json!({"epoch": 3})).unwrap();
        let (mut back, meta) = load_checkpoint::<f32>(&dir.path().join("a")).unwrap();
        let mut resumed = meta.rng.unwrap().restore().unwrap();
        assert_eq!(resumed.random::<u64>(), rng.random::<u64>());
        save_checkpoint(&back, &dir.path().join("b"), None, serde_json::Value::Null).unwrap();
        let a = fs::read(dir.path().join("a/params.bin")).unwrap();
        let b = fs::read(dir.path().join("b/params.bin")).unwrap();
        assert_eq!(a, b);

        let mut r = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::from_vec(&[2, 64, 20, 1], (0..2 * 64 * 20).map(|_| r.random_range(-1.0..1.0)).collect())
            .unwrap();
        let before = m.forward("d", &x, &[20, 14], Mode::Eval, None).unwrap().0;
        let after = back.forward("d", &x, &[20, 14], Mode::Eval, None).unwrap().0;
        assert_eq!(before.data(), after.data());
    }

    #[test]
    fn truncated_params_are_corrupt() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path(), None, serde_json::Value::Null).unwrap();
        let p = dir.path().join(PARAMS);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint::<f32>(dir.path()), Err(Error::CorruptCheckpoint { .. })));
    }

    #[test]
    fn version_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&model(), dir.path(), None, serde_json::Value::Null).unwrap();
        let p = dir.path().join(META);
        let text = fs::read_to_string(&p).unwrap().replace("\"format_version\": 1", "\"format_version\": 7");
        fs::write(&p, text).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(dir.path()),
            Err(Error::VersionMismatch { found: 7, .. })
        ));
    }
}
