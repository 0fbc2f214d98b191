//! Log-mel spectrogram extraction.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Floor applied to filterbank energies before the log.
pub const LOG_FLOOR: f32 = 1e-10;
pub const SUPPORTED_RATES: [u32; 2] = [8000, 16000];

#[derive(Clone, Debug, PartialEq)]
pub struct LogmelConfig {
    pub sample_rate_hz: u32,
    pub frame_length_ms: f64,
    pub frame_shift_ms: f64,
    pub mel_bins: usize,
}

impl LogmelConfig {
    pub fn new(sample_rate_hz: u32) -> Self {
        LogmelConfig {
            sample_rate_hz,
            frame_length_ms: 25.0,
            frame_shift_ms: 10.0,
            mel_bins: 40,
        }
    }

    pub fn frame_length(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_length_ms / 1000.0).round() as usize
    }

    pub fn frame_step(&self) -> usize {
        (self.sample_rate_hz as f64 * self.frame_shift_ms / 1000.0).round() as usize
    }

    pub fn fft_size(&self) -> usize {
        self.frame_length().next_power_of_two()
    }

    /// `floor((n - frame_length) / frame_step) + 1`, or 0 when `n` is shorter than a frame.
    pub fn num_frames(&self, num_samples: usize) -> usize {
        let len = self.frame_length();
        if num_samples < len {
            0
        } else {
            (num_samples - len) / self.frame_step() + 1
        }
    }

    fn validate(&self) -> Result<()> {
        if !SUPPORTED_RATES.contains(&self.sample_rate_hz) {
            return Err(Error::Audio(format!(
                "sample rate {} Hz is not supported (expected 8000 or 16000)",
                self.sample_rate_hz
            )));
        }
        if self.mel_bins == 0 || self.frame_step() == 0 || self.frame_length() == 0 {
            return Err(Error::config("mel bins, frame length and frame shift must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Spectrogram {
    /// `[T, F]`.
    pub frames: Tensor<f32>,
    pub frame_shift_ms: f64,
    pub frame_length_ms: f64,
    pub mel_bins: usize,
    pub sample_rate_hz: u32,
}

impl Spectrogram {
    pub fn num_frames(&self) -> usize {
        self.frames.dim(0)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// `bins + 2` band edges evenly spaced on the mel scale from 0 to Nyquist, in Hz.
pub fn mel_edges_hz(bins: usize, sample_rate_hz: u32) -> Vec<f64> {
    let top = hz_to_mel(sample_rate_hz as f64 / 2.0);
    (0..bins + 2)
        .map(|i| mel_to_hz(top * i as f64 / (bins + 1) as f64))
        .collect()
}

/// Triangular filters over the `n_fft / 2 + 1` spectrum bins, `[bins][n_fft/2+1]`.
pub fn mel_filterbank(bins: usize, n_fft: usize, sample_rate_hz: u32) -> Vec<Vec<f32>> {
    let edges = mel_edges_hz(bins, sample_rate_hz);
    let n_spec = n_fft / 2 + 1;
    let bin_hz = sample_rate_hz as f64 / n_fft as f64;
    (0..bins)
        .map(|m| {
            let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_spec)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let w = if f <= lo || f >= hi {
                        0.0
                    } else if f <= c {
                        (f - lo) / (c - lo)
                    } else {
                        (hi - f) / (hi - c)
                    };
                    w as f32
                })
                .collect()
        })
        .collect()
}

fn hamming(n: usize) -> Vec<f32> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| (0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()) as f32)
        .collect()
}

/// Reusable extractor holding the window, filterbank and FFT plan.
pub struct LogmelExtractor {
    config: LogmelConfig,
    window: Vec<f32>,
    filters: Vec<Vec<f32>>,
    fft: Arc<dyn Fft<f32>>,
}

impl LogmelExtractor {
    pub fn new(config: LogmelConfig) -> Result<Self> {
        config.validate()?;
        let n_fft = config.fft_size();
        Ok(LogmelExtractor {
            window: hamming(config.frame_length()),
            filters: mel_filterbank(config.mel_bins, n_fft, config.sample_rate_hz),
            fft: FftPlanner::new().plan_fft_forward(n_fft),
            config,
        })
    }

    pub fn config(&self) -> &LogmelConfig {
        &self.config
    }

    pub fn extract(&self, samples: &[f32]) -> Result<Spectrogram> {
        let c = &self.config;
        let t = c.num_frames(samples.len());
        if t == 0 {
            return Err(Error::Audio(format!(
                "{} samples is shorter than one {}-sample frame",
                samples.len(),
                c.frame_length()
            )));
        }
        let (len, step, n_fft) = (c.frame_length(), c.frame_step(), c.fft_size());
        let mut buf = vec![Complex::new(0.0f32, 0.0); n_fft];
        let mut scratch = vec![Complex::new(0.0f32, 0.0); self.fft.get_inplace_scratch_len()];
        let mut mag = vec![0.0f32; n_fft / 2 + 1];
        let mut out = Vec::with_capacity(t * c.mel_bins);
        for i in 0..t {
            let frame = &samples[i * step..i * step + len];
            for (k, z) in buf.iter_mut().enumerate() {
                *z = Complex::new(if k < len { frame[k] * self.window[k] } else { 0.0 }, 0.0);
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (m, z) in mag.iter_mut().zip(&buf) {
                *m = z.norm();
            }
            for filt in &self.filters {
                let e: f32 = filt.iter().zip(&mag).map(|(w, m)| w * m).sum();
                out.push(e.max(LOG_FLOOR).ln());
            }
        }
        Ok(Spectrogram {
            frames: Tensor::from_vec(&[t, c.mel_bins], out)?,
            frame_shift_ms: c.frame_shift_ms,
            frame_length_ms: c.frame_length_ms,
            mel_bins: c.mel_bins,
            sample_rate_hz: c.sample_rate_hz,
        })
    }
}

/// Default 40-bin, 25 ms / 10 ms log-mel features.
pub fn logmel(samples: &[f32], sample_rate_hz: u32) -> Result<Spectrogram> {
    LogmelExtractor::new(LogmelConfig::new(sample_rate_hz))?.extract(samples)
}
