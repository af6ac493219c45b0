//! Audio front end: 16 kHz waveform to stacked, normalized log-mel frames.
//!
//! Analysis geometry is fixed: 25 ms Hann window (400 samples), 10 ms shift
//! (160 samples), 512-point FFT, 40 triangular filters on the HTK mel scale
//! spanning 125-7500 Hz, natural log with an energy floor of 1e-6.

use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::features::{FeatureSequence, Provenance};

pub const SAMPLE_RATE_HZ: u32 = 16_000;
pub const WINDOW_SAMPLES: usize = 400;
pub const SHIFT_SAMPLES: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const NUM_MEL_BINS: usize = 40;
pub const LOW_HZ: f64 = 125.0;
pub const HIGH_HZ: f64 = 7500.0;
pub const LOG_FLOOR: f64 = 1e-6;
pub const VARIANCE_FLOOR: f64 = 1e-8;
pub const STACK: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate_hz: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz != SAMPLE_RATE_HZ {
            return Err(Error::Invalid(format!(
                "sample rate {sample_rate_hz} Hz, expected {SAMPLE_RATE_HZ} Hz"
            )));
        }
        if samples.len() < WINDOW_SAMPLES {
            return Err(Error::Length(format!(
                "{} samples, need at least {WINDOW_SAMPLES}",
                samples.len()
            )));
        }
        Ok(Self {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    /// Reads a 16 kHz, 16-bit PCM, mono RIFF file. Samples are scaled to [-1, 1).
    pub fn read_wav(path: &Path) -> Result<Self> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1
            || spec.bits_per_sample != 16
            || spec.sample_format != hound::SampleFormat::Int
        {
            return Err(Error::Invalid(format!(
                "{}: expected mono 16-bit PCM, found {} channel(s), {} bits",
                path.display(),
                spec.channels,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(samples, spec.sample_rate)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Number of analysis frames for `n` samples.
pub fn frame_count(n: usize) -> usize {
    if n < WINDOW_SAMPLES {
        0
    } else {
        (n - WINDOW_SAMPLES) / SHIFT_SAMPLES + 1
    }
}

/// Triangular filter weights, one row of `FFT_SIZE / 2 + 1` per mel bin.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    weights: Vec<Vec<f64>>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new() -> Self {
        let lo = hz_to_mel(LOW_HZ);
        let hi = hz_to_mel(HIGH_HZ);
        let edges: Vec<f64> = (0..NUM_MEL_BINS + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (NUM_MEL_BINS + 1) as f64))
            .collect();
        let bins = FFT_SIZE / 2 + 1;
        let bin_hz = SAMPLE_RATE_HZ as f64 / FFT_SIZE as f64;
        let weights = (0..NUM_MEL_BINS)
            .map(|m| {
                let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
                (0..bins)
                    .map(|k| {
                        let f = k as f64 * bin_hz;
                        if f <= left || f >= right {
                            0.0
                        } else if f <= center {
                            (f - left) / (center - left)
                        } else {
                            (right - f) / (right - center)
                        }
                    })
                    .collect()
            })
            .collect();
        Self {
            weights,
            centers_hz: edges[1..=NUM_MEL_BINS].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (o, w) in out.iter_mut().zip(&self.weights) {
            let energy: f64 = w.iter().zip(power).map(|(a, b)| a * b).sum();
            *o = energy.max(LOG_FLOOR).ln();
        }
    }
}

impl Default for MelFilterbank {
    fn default() -> Self {
        Self::new()
    }
}

/// 40-dimensional log-mel energies, one frame per 10 ms.
pub fn extract_logmel(wave: &Waveform) -> Result<FeatureSequence> {
    let samples = wave.samples();
    let frames = frame_count(samples.len());
    if frames == 0 {
        return Err(Error::Length(format!(
            "{} samples, need at least {WINDOW_SAMPLES}",
            samples.len()
        )));
    }
    let window: Vec<f64> = (0..WINDOW_SAMPLES)
        .map(|n| {
            0.5 - 0.5 * (std::f64::consts::TAU * n as f64 / (WINDOW_SAMPLES - 1) as f64).cos()
        })
        .collect();
    let bank = MelFilterbank::new();
    let fft = FftPlanner::<f64>::new().plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut power = vec![0.0; FFT_SIZE / 2 + 1];
    let mut data = vec![0.0; frames * NUM_MEL_BINS];

    for (t, row) in data.chunks_exact_mut(NUM_MEL_BINS).enumerate() {
        let start = t * SHIFT_SAMPLES;
        for (n, slot) in buf.iter_mut().enumerate() {
            *slot = if n < WINDOW_SAMPLES {
                Complex::new(samples[start + n] * window[n], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        bank.apply(&power, row);
    }
    FeatureSequence::new(frames, NUM_MEL_BINS, data, Provenance::RawMel)
}

/// Per-utterance mean-variance normalization of every dimension.
pub fn normalize(features: &FeatureSequence) -> FeatureSequence {
    let (frames, dim) = (features.frames(), features.dim());
    let mut data = features.data().to_vec();
    if frames > 0 {
        for d in 0..dim {
            let mean = features.rows().map(|r| r[d]).sum::<f64>() / frames as f64;
            let var = features.rows().map(|r| (r[d] - mean).powi(2)).sum::<f64>() / frames as f64;
            let scale = 1.0 / var.max(VARIANCE_FLOOR).sqrt();
            for t in 0..frames {
                let v = &mut data[t * dim + d];
                *v = (*v - mean) * scale;
            }
        }
    }
    FeatureSequence::new(frames, dim, data, features.provenance())
        .expect("shape preserved by normalization")
}

/// Stacks non-overlapping frame pairs (40 -> 80 dims, T -> floor(T/2)) and normalizes.
pub fn stack_and_normalize(raw: &FeatureSequence) -> Result<FeatureSequence> {
    if raw.frames() < STACK {
        return Err(Error::Length(format!(
            "{} frame(s), stacking needs at least {STACK}",
            raw.frames()
        )));
    }
    let frames = raw.frames() / STACK;
    let dim = raw.dim() * STACK;
    let data = raw.data()[..frames * dim].to_vec();
    let stacked = FeatureSequence::new(frames, dim, data, Provenance::StackedNormalized)?;
    Ok(normalize(&stacked))
}

/// Waveform file to network-ready features.
pub fn featurize_wav(path: &Path) -> Result<FeatureSequence> {
    let wave = Waveform::read_wav(path)?;
    stack_and_normalize(&extract_logmel(&wave)?)
}
