//! Input builders shared by the kernel benchmarks.

use serval_core::compute::Tensor;
use serval_core::dsp::{Waveform, SAMPLE_RATE};

/// Fixed pseudo-random values in `[-scale, scale)`.
pub fn values(n: usize, seed: u64, scale: f32) -> Vec<f32> {
    let mut s = seed ^ 0x9e37_79b9_7f4a_7c15;
    (0..n)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 40) as f32 / (1u32 << 24) as f32 * 2.0 - 1.0) * scale
        })
        .collect()
}

pub fn tensor(shape: &[usize], seed: u64, scale: f32) -> Tensor<f32> {
    Tensor::from_vec(shape, values(shape.iter().product(), seed, scale)).expect("shape and length agree")
}

/// A chirp with a little noise, `seconds` long at the working sample rate.
pub fn speech_like(seconds: f64) -> Waveform {
    let n = (seconds * SAMPLE_RATE as f64) as usize;
    let noise = values(n, 1, 0.05);
    Waveform::new(
        (0..n)
            .map(|i| {
                let t = i as f64 / SAMPLE_RATE as f64;
                let f = 120.0 + 80.0 * t;
                (0.4 * (2.0 * std::f64::consts::PI * f * t).sin()) as f32 + noise[i]
            })
            .collect(),
    )
}
