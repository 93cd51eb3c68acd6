//! Audio ingestion and the log-mel frontend.
//!
//! 16 kHz mono input, 512-sample periodic Hann windows with a 256-sample hop
//! (no centre padding), one-sided power spectrum, 64 triangular HTK-mel
//! filters spanning 0–8000 Hz, natural log with a 1e-10 floor.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::compute::Tensor;
use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const N_FFT: usize = 512;
pub const HOP: usize = 256;
pub const N_BINS: usize = N_FFT / 2 + 1;
pub const N_MELS: usize = 64;
pub const F_MIN: f64 = 0.0;
pub const F_MAX: f64 = 8_000.0;
pub const LOG_FLOOR: f64 = 1e-10;
pub const MAX_SECONDS: f64 = 5.0;
pub const CROP_SAMPLES: usize = 80_000;

/// Frontend settings recorded alongside checkpoints and run outputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FrontendSettings {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub mel_bands: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub mel_scale: String,
    pub window: String,
    pub log_floor: f64,
    pub max_seconds: f64,
    pub train_crop: String,
    pub eval_crop: String,
}

impl Default for FrontendSettings {
    fn default() -> Self {
        FrontendSettings {
            sample_rate: SAMPLE_RATE,
            n_fft: N_FFT,
            hop: HOP,
            mel_bands: N_MELS,
            f_min: F_MIN,
            f_max: F_MAX,
            mel_scale: "htk".into(),
            window: "hann_periodic".into(),
            log_floor: LOG_FLOOR,
            max_seconds: MAX_SECONDS,
            train_crop: "random".into(),
            eval_crop: "center".into(),
        }
    }
}

impl FrontendSettings {
    pub fn validate(&self) -> Result<()> {
        let fixed = FrontendSettings::default();
        if *self != fixed {
            return Err(Error::InvalidConfig(format!(
                "frontend settings are fixed; expected {}",
                serde_json::to_string(&fixed).unwrap_or_default()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
    /// Original rate when the file was resampled on ingestion.
    pub resampled_from: Option<u32>,
}

impl Waveform {
    pub fn new(samples: Vec<f32>) -> Self {
        Waveform {
            samples,
            sample_rate: SAMPLE_RATE,
            resampled_from: None,
        }
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

fn map_hound(path: &Path, err: hound::Error) -> Error {
    match err {
        hound::Error::IoError(e) if e.kind() == std::io::ErrorKind::NotFound => Error::io(path, e),
        hound::Error::IoError(_) | hound::Error::FormatError(_) => Error::NotWav(path.into()),
        hound::Error::Unsupported => Error::UnsupportedEncoding {
            path: path.into(),
            detail: "unsupported WAVE format".into(),
        },
        other => Error::UnsupportedEncoding {
            path: path.into(),
            detail: other.to_string(),
        },
    }
}

/// Reads integer PCM, averages channels, scales to [-1, 1) and resamples to
/// 16 kHz when needed.
pub fn read_wav(path: &Path) -> Result<Waveform> {
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedEncoding {
            path: path.into(),
            detail: "floating-point samples (PCM required)".into(),
        });
    }
    let channels = spec.channels.max(1) as usize;
    let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
    let raw: Vec<i32> = reader
        .into_samples::<i32>()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| map_hound(path, e))?;
    if raw.len() < channels {
        return Err(Error::EmptyAudio(path.into()));
    }
    let mono: Vec<f32> = raw
        .chunks_exact(channels)
        .map(|frame| {
            let sum: f64 = frame.iter().map(|&s| s as f64 * scale).sum();
            (sum / channels as f64) as f32
        })
        .collect();
    if spec.sample_rate == SAMPLE_RATE {
        Ok(Waveform::new(mono))
    } else {
        Ok(Waveform {
            samples: resample_linear(&mono, spec.sample_rate, SAMPLE_RATE),
            sample_rate: SAMPLE_RATE,
            resampled_from: Some(spec.sample_rate),
        })
    }
}

/// Duration in seconds from the WAVE header alone.
pub fn wav_duration(path: &Path) -> Result<f64> {
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    Ok(reader.duration() as f64 / reader.spec().sample_rate as f64)
}

/// Writes 16-bit mono PCM at 16 kHz; samples are clipped to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f32]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) as f64 * 32767.0).round() as i16;
        w.write_sample(v).map_err(|e| map_hound(path, e))?;
    }
    w.finalize().map_err(|e| map_hound(path, e))
}

pub fn resample_linear(samples: &[f32], from: u32, to: u32) -> Vec<f32> {
    if from == to || samples.is_empty() {
        return samples.to_vec();
    }
    let out_len = ((samples.len() as u64 * to as u64) / from as u64).max(1) as usize;
    let ratio = from as f64 / to as f64;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = samples[j.min(samples.len() - 1)] as f64;
            let b = samples[(j + 1).min(samples.len() - 1)] as f64;
            (a + (b - a) * frac) as f32
        })
        .collect()
}

/// Number of analysis frames; inputs shorter than one window count as one.
pub fn frame_count(length: usize) -> usize {
    1 + (length.max(N_FFT) - N_FFT) / HOP
}

fn hann() -> &'static [f64] {
    static WINDOW: OnceLock<Vec<f64>> = OnceLock::new();
    WINDOW.get_or_init(|| {
        (0..N_FFT)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / N_FFT as f64).cos())
            .collect()
    })
}

pub fn hann_window() -> &'static [f64] {
    hann()
}

/// One-sided power spectrogram, frame-major `[frames][257]`.
#[derive(Clone, Debug)]
pub struct PowerSpectrogram {
    pub frames: usize,
    pub data: Vec<f64>,
}

impl PowerSpectrogram {
    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * N_BINS..(t + 1) * N_BINS]
    }
}

pub fn stft_power(w: &Waveform) -> PowerSpectrogram {
    let mut padded;
    let samples: &[f32] = if w.samples.len() < N_FFT {
        padded = w.samples.clone();
        padded.resize(N_FFT, 0.0);
        &padded
    } else {
        &w.samples
    };
    let frames = frame_count(samples.len());
    let fft = FftPlanner::<f64>::new().plan_fft_forward(N_FFT);
    let window = hann();
    let mut buf = vec![Complex::new(0.0, 0.0); N_FFT];
    let mut scratch = vec![Complex::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    let mut data = Vec::with_capacity(frames * N_BINS);
    for t in 0..frames {
        let start = t * HOP;
        for (n, c) in buf.iter_mut().enumerate() {
            *c = Complex::new(samples[start + n] as f64 * window[n], 0.0);
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        data.extend(buf[..N_BINS].iter().map(|c| c.norm_sqr()));
    }
    PowerSpectrogram { frames, data }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Filter edge/centre frequencies: `N_MELS + 2` points equally spaced in mel.
pub fn mel_points_hz() -> Vec<f64> {
    let (lo, hi) = (hz_to_mel(F_MIN), hz_to_mel(F_MAX));
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

pub fn mel_centers_hz() -> Vec<f64> {
    mel_points_hz()[1..=N_MELS].to_vec()
}

/// Triangular filters with unit peak, row-major `[64][257]`.
pub fn mel_filterbank() -> &'static [f64] {
    static BANK: OnceLock<Vec<f64>> = OnceLock::new();
    BANK.get_or_init(|| {
        let pts = mel_points_hz();
        let bin_hz = SAMPLE_RATE as f64 / N_FFT as f64;
        let mut bank = vec![0.0; N_MELS * N_BINS];
        for m in 0..N_MELS {
            let (lo, mid, hi) = (pts[m], pts[m + 1], pts[m + 2]);
            for k in 0..N_BINS {
                let f = k as f64 * bin_hz;
                let up = (f - lo) / (mid - lo);
                let down = (hi - f) / (hi - mid);
                bank[m * N_BINS + k] = up.min(down).max(0.0);
            }
        }
        bank
    })
}

/// Log-mel matrix stored frame-major: `values[t * 64 + band]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub frames: usize,
    pub values: Vec<f32>,
}

impl MelSpectrogram {
    pub fn frame(&self, t: usize) -> &[f32] {
        &self.values[t * N_MELS..(t + 1) * N_MELS]
    }

    pub fn get(&self, band: usize, t: usize) -> f32 {
        self.values[t * N_MELS + band]
    }
}

pub fn log_mel(w: &Waveform) -> MelSpectrogram {
    let power = stft_power(w);
    let bank = mel_filterbank();
    let mut values = Vec::with_capacity(power.frames * N_MELS);
    for t in 0..power.frames {
        let frame = power.frame(t);
        for m in 0..N_MELS {
            let row = &bank[m * N_BINS..(m + 1) * N_BINS];
            let e: f64 = row.iter().zip(frame).map(|(a, b)| a * b).sum();
            values.push(e.max(LOG_FLOOR).ln() as f32);
        }
    }
    MelSpectrogram {
        frames: power.frames,
        values,
    }
}

/// Random contiguous 5 s window for longer inputs; identity otherwise.
pub fn crop_5s(w: &Waveform, seed: u64) -> Waveform {
    if w.samples.len() <= CROP_SAMPLES {
        return w.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let offset = rng.random_range(0..=w.samples.len() - CROP_SAMPLES);
    Waveform {
        samples: w.samples[offset..offset + CROP_SAMPLES].to_vec(),
        ..w.clone()
    }
}

/// Deterministic centre window used at evaluation time.
pub fn center_crop_5s(w: &Waveform) -> Waveform {
    if w.samples.len() <= CROP_SAMPLES {
        return w.clone();
    }
    let offset = (w.samples.len() - CROP_SAMPLES) / 2;
    Waveform {
        samples: w.samples[offset..offset + CROP_SAMPLES].to_vec(),
        ..w.clone()
    }
}

/// Network input `[B, 64, T_max, 1]` with zeros past each item's frames.
#[derive(Clone, Debug)]
pub struct PaddedBatch {
    pub tensor: Tensor<f32>,
    pub valid_frames: Vec<usize>,
}

pub fn pad_batch(specs: &[&MelSpectrogram]) -> Result<PaddedBatch> {
    if specs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let t_max = specs.iter().map(|s| s.frames).max().unwrap_or(0);
    let b = specs.len();
    let mut tensor = Tensor::zeros(&[b, N_MELS, t_max, 1]);
    let data = tensor.data_mut();
    for (bi, s) in specs.iter().enumerate() {
        for t in 0..s.frames {
            for m in 0..N_MELS {
                data[(bi * N_MELS + m) * t_max + t] = s.values[t * N_MELS + m];
            }
        }
    }
    Ok(PaddedBatch {
        tensor,
        valid_frames: specs.iter().map(|s| s.frames).collect(),
    })
}

const MELS_MAGIC: &[u8; 4] = b"MELS";
const MELS_VERSION: u32 = 1;

pub fn write_mels(path: &Path, spec: &MelSpectrogram) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MELS_MAGIC)?;
    put(&MELS_VERSION.to_le_bytes())?;
    put(&(N_MELS as u32).to_le_bytes())?;
    put(&(spec.frames as u32).to_le_bytes())?;
    for v in &spec.values {
        put(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_mels(path: &Path) -> Result<MelSpectrogram> {
    let mut bytes = Vec::new();
    BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let bad = |message: &str| Error::BadMelFile {
        path: path.into(),
        message: message.into(),
    };
    if bytes.len() < 16 || &bytes[..4] != MELS_MAGIC {
        return Err(bad("missing MELS header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes"));
    if word(4) != MELS_VERSION {
        return Err(bad("unsupported version"));
    }
    if word(8) as usize != N_MELS {
        return Err(bad("band count is not 64"));
    }
    let frames = word(12) as usize;
    if bytes.len() != 16 + frames * N_MELS * 4 {
        return Err(bad("payload length does not match frame count"));
    }
    let values = bytes[16..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok(MelSpectrogram { frames, values })
}
