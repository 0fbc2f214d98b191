//! Random time and frequency band masking.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SpecAugmentPolicy {
    pub num_freq_masks: usize,
    pub num_time_masks: usize,
    pub max_freq_width: usize,
    pub max_time_width: usize,
    pub mask_value: f32,
    pub seed: u64,
}

impl Default for SpecAugmentPolicy {
    fn default() -> Self {
        SpecAugmentPolicy {
            num_freq_masks: 2,
            num_time_masks: 2,
            max_freq_width: 8,
            max_time_width: 20,
            mask_value: 0.0,
            seed: 0,
        }
    }
}

impl SpecAugmentPolicy {
    pub fn none() -> Self {
        SpecAugmentPolicy {
            num_freq_masks: 0,
            num_time_masks: 0,
            ..Self::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    Time,
    Freq,
}

/// A half-open band `[start, start + width)` along one axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Mask {
    pub axis: Axis,
    pub start: usize,
    pub width: usize,
}

fn draw(rng: &mut ChaCha8Rng, axis: Axis, max_width: usize, extent: usize) -> Mask {
    let width = rng.gen_range(0..=max_width.min(extent));
    let start = rng.gen_range(0..=extent - width);
    Mask { axis, start, width }
}

/// Masks for a `frames × bins` spectrogram: frequency masks first, then time masks.
pub fn sample_masks(policy: &SpecAugmentPolicy, frames: usize, bins: usize) -> Vec<Mask> {
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let freq = (0..policy.num_freq_masks).map(|_| draw(&mut rng, Axis::Freq, policy.max_freq_width, bins));
    let freq: Vec<Mask> = freq.collect();
    let time = (0..policy.num_time_masks).map(|_| draw(&mut rng, Axis::Time, policy.max_time_width, frames));
    freq.into_iter().chain(time).collect()
}

/// Apply masks to a `[T, F]` tensor in place.
pub fn apply_masks(x: &mut Tensor<f32>, masks: &[Mask], value: f32) {
    let f = x.dim(1);
    let data = x.data_mut();
    for m in masks {
        match m.axis {
            Axis::Freq => {
                for row in data.chunks_mut(f) {
                    row[m.start..m.start + m.width].fill(value);
                }
            }
            Axis::Time => data[m.start * f..(m.start + m.width) * f].fill(value),
        }
    }
}

/// Masked copy of a `[T, F]` tensor.
pub fn spec_augment(x: &Tensor<f32>, policy: &SpecAugmentPolicy) -> Tensor<f32> {
    let masks = sample_masks(policy, x.dim(0), x.dim(1));
    let mut y = x.clone();
    apply_masks(&mut y, &masks, policy.mask_value);
    y
}
