//! Minibatch training with frame-level cross-entropy, momentum SGD, a
//! geometric learning-rate decay and periodic semi-orthogonal updates.
//!
//! The objective is a frame-classification surrogate: the network's
//! structural properties do not depend on the sequence-level criterion a
//! full recognizer would use.

pub mod checkpoint;
pub mod data;
pub mod loss;
pub mod optim;

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::derive_seed;
use crate::layers::{Layer, Mode};
use crate::multistream::Model;
use crate::par;
use crate::tensor::Tensor;

use data::Dataset;
use loss::{argmax_rows, cross_entropy};
use optim::Sgd;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub epochs: usize,
    pub minibatch: usize,
    pub momentum: f64,
    /// Steps between semi-orthogonal updates.
    pub constraint_interval: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: 1e-3,
            lr_end: 1e-5,
            epochs: 6,
            minibatch: 64,
            momentum: 0.9,
            constraint_interval: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_start >= 0.0 && self.lr_end >= 0.0 && self.lr_end <= self.lr_start) {
            return Err(Error::config(format!(
                "learning rates must satisfy 0 <= lr_end <= lr_start, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if self.epochs == 0 || self.minibatch == 0 || self.constraint_interval == 0 {
            return Err(Error::config(
                "epochs, minibatch and constraint_interval must be positive",
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, utterances: usize) -> u64 {
        utterances.div_ceil(self.minibatch) as u64
    }

    pub fn total_steps(&self, utterances: usize) -> u64 {
        self.epochs as u64 * self.steps_per_epoch(utterances)
    }
}

/// `lr_start · (lr_end / lr_start)^(step / total)`, exact at both ends.
pub fn lr_at(config: &TrainConfig, step: u64, total_steps: u64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::config("learning-rate schedule needs total_steps > 0"));
    }
    if step > total_steps {
        return Err(Error::config(format!(
            "step {step} is past the schedule end {total_steps}"
        )));
    }
    let (a, b) = (config.lr_start, config.lr_end);
    if step == 0 || a == b {
        return Ok(a);
    }
    if step == total_steps {
        return Ok(b);
    }
    Ok(a * (b / a).powf(step as f64 / total_steps as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub lr: f64,
    pub max_ortho_defect: f64,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{:.6}\t{:.6e}\t{:.6e}",
            self.epoch, self.mean_loss, self.lr, self.max_ortho_defect
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepInfo {
    /// Completed steps after this one.
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

/// Resumable position in the schedule.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct TrainState {
    /// Completed optimizer steps.
    pub step: u64,
    /// 0-based epoch in progress.
    pub epoch: usize,
    pub epoch_loss_sum: f64,
    pub epoch_frames: u64,
}

pub struct Trainer {
    pub model: Model<f32>,
    pub config: TrainConfig,
    optimizer: Sgd<f32>,
    state: TrainState,
}

impl Trainer {
    pub fn new(model: Model<f32>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            optimizer: Sgd::new(config.momentum),
            model,
            config,
            state: TrainState::default(),
        })
    }

    pub fn state(&self) -> TrainState {
        self.state
    }

    pub fn optimizer(&self) -> &Sgd<f32> {
        &self.optimizer
    }

    pub(crate) fn restore(
        model: Model<f32>,
        config: TrainConfig,
        optimizer: Sgd<f32>,
        state: TrainState,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            model,
            config,
            optimizer,
            state,
        })
    }

    /// Utterance order for `epoch`, fixed by the seed.
    pub fn epoch_order(&self, epoch: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.config.seed, &format!("shuffle/{epoch}")));
        order.shuffle(&mut rng);
        order
    }

    pub fn is_finished(&self) -> bool {
        self.state.epoch >= self.config.epochs
    }

    /// Train to the end of the schedule.
    pub fn train(&mut self, data: &Dataset) -> Result<Vec<EpochLog>> {
        self.train_until(data, None, |_| {})
    }

    /// Train until the schedule ends or `stop_at` steps have completed.
    /// Returns the log lines of epochs finished during this call.
    pub fn train_until(
        &mut self,
        data: &Dataset,
        stop_at: Option<u64>,
        mut on_step: impl FnMut(StepInfo),
    ) -> Result<Vec<EpochLog>> {
        if data.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let n = data.len();
        let spe = self.config.steps_per_epoch(n);
        let total = self.config.total_steps(n);
        let mb = self.config.minibatch;
        let mut logs = Vec::new();
        while self.state.epoch < self.config.epochs {
            let order = self.epoch_order(self.state.epoch, n);
            let first = self.state.step - self.state.epoch as u64 * spe;
            for b in first..spe {
                if stop_at.is_some_and(|s| self.state.step >= s) {
                    return Ok(logs);
                }
                let b = b as usize;
                let batch = &order[b * mb..((b + 1) * mb).min(n)];
                let lr = lr_at(&self.config, self.state.step, total)?;
                let (loss, frames) = self.train_step(data, batch, lr)?;
                self.state.step += 1;
                self.state.epoch_loss_sum += loss * frames as f64;
                self.state.epoch_frames += frames as u64;
                if self.state.step.is_multiple_of(self.config.constraint_interval) {
                    self.model.semi_orthogonal_step();
                }
                on_step(StepInfo {
                    step: self.state.step,
                    loss,
                    lr,
                });
            }
            logs.push(EpochLog {
                epoch: self.state.epoch + 1,
                mean_loss: self.state.epoch_loss_sum / self.state.epoch_frames.max(1) as f64,
                lr: lr_at(&self.config, self.state.step - 1, total)?,
                max_ortho_defect: self.model.max_ortho_defect(),
            });
            self.state.epoch += 1;
            self.state.epoch_loss_sum = 0.0;
            self.state.epoch_frames = 0;
        }
        Ok(logs)
    }

    /// One optimizer step on `batch`; returns mean loss and output frame count.
    fn train_step(&mut self, data: &Dataset, batch: &[usize], lr: f64) -> Result<(f64, usize)> {
        self.model.zero_grad();
        let mode = Mode::Training { step: self.state.step };
        let need = self.model.config().min_frames();
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &i in batch {
            let t = data.utterances[i].features.dim(0);
            if t < need {
                return Err(Error::InsufficientContext {
                    op: "train",
                    required: need,
                    actual: t,
                });
            }
            groups.entry(t).or_default().push(i);
        }
        let total_frames: usize = groups.iter().map(|(t, g)| (t + 1 - need) * g.len()).sum();
        let mut loss_sum = 0.0;
        for (t, group) in &groups {
            let x = Tensor::stack(
                &group
                    .iter()
                    .map(|&i| data.utterances[i].features.clone())
                    .collect::<Vec<_>>(),
            )?;
            let out_t = t + 1 - need;
            let labels: Vec<usize> = group
                .iter()
                .flat_map(|&i| std::iter::repeat_n(data.utterances[i].label, out_t))
                .collect();
            let logits = self.model.forward(&x, mode)?;
            let (loss, grad) = cross_entropy(&logits, &labels)?;
            let w = labels.len() as f64 / total_frames as f64;
            loss_sum += loss * labels.len() as f64;
            self.model.backward(&grad.map(|g| g * w as f32))?;
        }
        let loss = loss_sum / total_frames as f64;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.state.step,
                value: loss,
            });
        }
        self.optimizer.step(&mut self.model, lr);
        Ok((loss, total_frames))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub frames: usize,
}

/// Frame accuracy and mean cross-entropy in inference mode.
pub fn evaluate(model: &Model<f32>, data: &Dataset) -> Result<EvalReport> {
    let per_utt = par::map(&data.utterances, |_, u| -> Result<(usize, usize, f64)> {
        let logits = model.infer_utterance(&u.features)?;
        let labels = vec![u.label; logits.rows()];
        let (loss, _) = cross_entropy(&logits, &labels)?;
        let correct = argmax_rows(&logits).iter().filter(|&&p| p == u.label).count();
        Ok((correct, labels.len(), loss * labels.len() as f64))
    });
    let (mut correct, mut frames, mut loss) = (0, 0, 0.0);
    for r in per_utt {
        let (c, f, l) = r?;
        correct += c;
        frames += f;
        loss += l;
    }
    if frames == 0 {
        return Err(Error::config("evaluation set is empty"));
    }
    Ok(EvalReport {
        accuracy: correct as f64 / frames as f64,
        mean_loss: loss / frames as f64,
        frames,
    })
}
