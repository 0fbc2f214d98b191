//! Throughput and real-time-factor measurement.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::layers::Layer;
use crate::multistream::Model;
use crate::tensor::Tensor;

/// Wall time divided by the audio duration of `frames` frames.
pub fn rtf(wall_seconds: f64, frames: usize, frame_shift_seconds: f64) -> f64 {
    wall_seconds / (frames as f64 * frame_shift_seconds)
}

/// `(base - new) / base`.
pub fn relative_improvement(rtf_base: f64, rtf_new: f64) -> f64 {
    (rtf_base - rtf_new) / rtf_base
}

/// Median of a non-empty sample (mean of the middle pair for even sizes).
pub fn median(samples: &[f64]) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub frames: usize,
    pub threads: usize,
    pub repetitions: usize,
    /// Per-repetition wall times in seconds.
    pub times: Vec<f64>,
    pub median_seconds: f64,
    /// Input frames processed per second across all workers.
    pub frames_per_second: f64,
    pub rtf: f64,
}

impl BenchReport {
    /// Build a report from measured wall times.
    pub fn from_times(frames: usize, threads: usize, frame_shift_seconds: f64, times: Vec<f64>) -> Self {
        let m = median(&times);
        BenchReport {
            frames,
            threads,
            repetitions: times.len(),
            median_seconds: m,
            frames_per_second: (frames * threads) as f64 / m,
            rtf: rtf(m, frames, frame_shift_seconds),
            times,
        }
    }
}

pub const MIN_REPETITIONS: usize = 5;

/// Time `repetitions` inference passes in which `threads` workers each
/// process their own random `frames`-long input.
pub fn run_bench(
    model: &Model<f32>,
    frames: usize,
    threads: usize,
    repetitions: usize,
    frame_shift_seconds: f64,
) -> Result<BenchReport> {
    let need = model.config().min_frames();
    if frames < need {
        return Err(Error::InsufficientContext {
            op: "bench",
            required: need,
            actual: frames,
        });
    }
    if threads == 0 {
        return Err(Error::config("bench needs at least one thread"));
    }
    let reps = repetitions.max(MIN_REPETITIONS);
    let dim = model.config().input_dim;
    let inputs: Vec<Tensor<f32>> = (0..threads)
        .map(|w| {
            let mut s = (w as u32).wrapping_mul(2654435761).wrapping_add(1);
            Tensor::from_fn(&[1, frames, dim], |_| {
                s ^= s << 13;
                s ^= s >> 17;
                s ^= s << 5;
                (s as f32 / u32::MAX as f32) * 2.0 - 1.0
            })
        })
        .collect();
    let mut times = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        if threads == 1 {
            model.infer(&inputs[0])?;
        } else {
            std::thread::scope(|scope| {
                let handles: Vec<_> = inputs.iter().map(|x| scope.spawn(move || model.infer(x))).collect();
                handles
                    .into_iter()
                    .try_for_each(|h| h.join().expect("bench worker panicked").map(drop))
            })?;
        }
        times.push(start.elapsed().as_secs_f64());
    }
    Ok(BenchReport::from_times(frames, threads, frame_shift_seconds, times))
}
