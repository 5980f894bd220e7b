//! Log-mel filterbank frontend and 3-frame stacking.
//!
//! Audio is framed with a 25 ms Hann window every 10 ms, transformed with a
//! 512-point FFT and projected onto 40 triangular mel bands between 125 and
//! 7500 Hz. Three adjacent spectral frames are then concatenated with a
//! stride of two, giving one 120-dimensional vector every 20 ms.

use std::path::Path;
use std::sync::Arc;

use ndarray::{s, Array2, ArrayView1};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{KwsError, Result};

pub const N_MELS: usize = 40;
pub const STACK: usize = 3;
pub const STACK_STRIDE: usize = 2;
pub const FEATURE_DIM: usize = N_MELS * STACK;
/// Duration of one stacked feature vector.
pub const STACKED_FRAME_SECONDS: f64 = 0.020;

#[derive(Debug, Clone, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<i16>,
    pub sample_rate_hz: u32,
    pub channels: u16,
}

impl AudioClip {
    pub fn mono_16k(samples: Vec<i16>) -> Self {
        Self {
            samples,
            sample_rate_hz: 16_000,
            channels: 1,
        }
    }

    /// Reads a RIFF WAV file holding mono 16 kHz PCM16LE audio.
    pub fn read_wav(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut reader = hound::WavReader::open(path)
            .map_err(|e| KwsError::Data(format!("{}: {e}", path.display())))?;
        let spec = reader.spec();
        if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
            return Err(KwsError::Data(format!(
                "{}: expected 16-bit PCM, got {:?} {} bits",
                path.display(),
                spec.sample_format,
                spec.bits_per_sample
            )));
        }
        let samples = reader
            .samples::<i16>()
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| KwsError::Data(format!("{}: {e}", path.display())))?;
        Ok(Self {
            samples,
            sample_rate_hz: spec.sample_rate,
            channels: spec.channels,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate_hz: u32,
    pub window_samples: usize,
    pub hop_samples: usize,
    pub fft_size: usize,
    pub low_hz: f64,
    pub high_hz: f64,
    pub log_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: 16_000,
            window_samples: 400,
            hop_samples: 160,
            fft_size: 512,
            low_hz: 125.0,
            high_hz: 7500.0,
            log_floor: 1e-12,
        }
    }
}

/// One 10 ms frame of log mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralFrame {
    pub energies: [f32; N_MELS],
    pub frame_index: usize,
}

impl SpectralFrame {
    pub fn new(energies: [f32; N_MELS], frame_index: usize) -> Self {
        Self {
            energies,
            frame_index,
        }
    }
}

/// Time-major stacked features; row `t` is the input vector at 20 ms step `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub vectors: Array2<f32>,
}

impl FeatureSequence {
    pub fn new(vectors: Array2<f32>) -> Result<Self> {
        if vectors.ncols() != FEATURE_DIM {
            return Err(KwsError::Shape(format!(
                "feature vectors have {} entries, expected {FEATURE_DIM}",
                vectors.ncols()
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(KwsError::Data("non-finite feature value".into()));
        }
        Ok(Self { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.nrows() == 0
    }

    pub fn frame(&self, t: usize) -> ArrayView1<'_, f32> {
        self.vectors.row(t)
    }

    pub fn duration_seconds(&self) -> f64 {
        self.len() as f64 * STACKED_FRAME_SECONDS
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Band edge frequencies: `N_MELS + 2` points equally spaced on the mel scale.
/// Band `m` rises from point `m` to its center `m + 1` and falls to `m + 2`.
pub fn mel_band_edges(config: &FrontendConfig) -> Vec<f64> {
    let lo = hz_to_mel(config.low_hz);
    let hi = hz_to_mel(config.high_hz);
    (0..N_MELS + 2)
        .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (N_MELS + 1) as f64))
        .collect()
}

/// Reusable filterbank: FFT plan, window and mel weights.
pub struct Frontend {
    config: FrontendConfig,
    window: Vec<f64>,
    weights: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl Frontend {
    pub fn new(config: FrontendConfig) -> Result<Self> {
        if config.window_samples == 0 || config.hop_samples == 0 {
            return Err(KwsError::Config("window and hop must be positive".into()));
        }
        if config.fft_size < config.window_samples {
            return Err(KwsError::Config(format!(
                "fft size {} smaller than window {}",
                config.fft_size, config.window_samples
            )));
        }
        let n = config.window_samples;
        let window = (0..n)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos())
            .collect();

        let n_bins = config.fft_size / 2 + 1;
        let edges = mel_band_edges(&config);
        let mut weights = Array2::zeros((N_MELS, n_bins));
        for m in 0..N_MELS {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * config.sample_rate_hz as f64 / config.fft_size as f64;
                weights[[m, k]] = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
            }
        }
        let fft = FftPlanner::new().plan_fft_forward(config.fft_size);
        Ok(Self {
            config,
            window,
            weights,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.config
    }

    pub fn frame_count(&self, n_samples: usize) -> usize {
        if n_samples < self.config.window_samples {
            0
        } else {
            (n_samples - self.config.window_samples) / self.config.hop_samples + 1
        }
    }

    pub fn compute(&self, clip: &AudioClip) -> Result<Vec<SpectralFrame>> {
        let cfg = &self.config;
        if clip.channels != 1 {
            return Err(KwsError::Config(format!(
                "expected mono audio, got {} channels",
                clip.channels
            )));
        }
        if clip.sample_rate_hz != cfg.sample_rate_hz {
            return Err(KwsError::Config(format!(
                "expected {} Hz audio, got {} Hz",
                cfg.sample_rate_hz, clip.sample_rate_hz
            )));
        }
        if clip.samples.len() < cfg.window_samples {
            return Err(KwsError::Data(format!(
                "clip has {} samples, shorter than one {}-sample window",
                clip.samples.len(),
                cfg.window_samples
            )));
        }

        let n_frames = self.frame_count(clip.samples.len());
        let n_bins = cfg.fft_size / 2 + 1;
        let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_size];
        let mut power = vec![0.0f64; n_bins];
        let mut frames = Vec::with_capacity(n_frames);
        for index in 0..n_frames {
            let start = index * cfg.hop_samples;
            let segment = &clip.samples[start..start + cfg.window_samples];
            for (slot, (&s, &w)) in buf.iter_mut().zip(segment.iter().zip(&self.window)) {
                *slot = Complex::new(s as f64 / 32768.0 * w, 0.0);
            }
            for slot in buf[cfg.window_samples..].iter_mut() {
                *slot = Complex::new(0.0, 0.0);
            }
            self.fft.process(&mut buf);
            for (p, c) in power.iter_mut().zip(&buf[..n_bins]) {
                *p = c.norm_sqr();
            }
            let mut energies = [0.0f32; N_MELS];
            for (m, e) in energies.iter_mut().enumerate() {
                let band: f64 = self
                    .weights
                    .row(m)
                    .iter()
                    .zip(&power)
                    .map(|(w, p)| w * p)
                    .sum();
                *e = (band + cfg.log_floor).ln() as f32;
            }
            frames.push(SpectralFrame::new(energies, index));
        }
        Ok(frames)
    }
}

/// Computes one log-mel frame per hop for a mono 16 kHz clip.
pub fn compute_filterbank(clip: &AudioClip, config: &FrontendConfig) -> Result<Vec<SpectralFrame>> {
    Frontend::new(*config)?.compute(clip)
}

/// Number of stacked vectors produced from `n_frames` spectral frames.
pub fn stacked_len(n_frames: usize) -> usize {
    if n_frames < STACK {
        0
    } else {
        (n_frames - STACK) / STACK_STRIDE + 1
    }
}

/// Concatenates frames `2j, 2j+1, 2j+2` into output vector `j`.
pub fn stack_frames(frames: &[SpectralFrame]) -> Result<FeatureSequence> {
    if frames.len() < STACK {
        return Err(KwsError::Data(format!(
            "need at least {STACK} spectral frames to stack, got {}",
            frames.len()
        )));
    }
    let n_out = stacked_len(frames.len());
    let mut vectors = Array2::zeros((n_out, FEATURE_DIM));
    for (j, mut row) in vectors.outer_iter_mut().enumerate() {
        for k in 0..STACK {
            let src = &frames[STACK_STRIDE * j + k].energies;
            row.slice_mut(s![k * N_MELS..(k + 1) * N_MELS])
                .iter_mut()
                .zip(src)
                .for_each(|(d, &v)| *d = v);
        }
    }
    FeatureSequence::new(vectors)
}
