//! Labeled utterance sets and the synthetic multi-timescale corpus.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::frontend::io::{read_fmat, write_fmat};
use crate::init::derive_seed;
use crate::tensor::Tensor;

/// Features `[T, F]` with one class label shared by every frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Utterance {
    pub features: Tensor<f32>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub utterances: Vec<Utterance>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.utterances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.utterances.is_empty()
    }

    pub fn feature_dim(&self) -> Option<usize> {
        self.utterances.first().map(|u| u.features.dim(1))
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            utterances: indices.iter().map(|&i| self.utterances[i].clone()).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Write `name.list` plus one FMAT1 file per utterance under `dir`.
    pub fn write_list(&self, dir: &Path, name: &str) -> Result<()> {
        let feats = dir.join(name);
        fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;
        let mut list = format!("# classes {}\n", self.num_classes);
        for (i, u) in self.utterances.iter().enumerate() {
            let rel = format!("{name}/{i:05}.fmat");
            write_fmat(&dir.join(&rel), &u.features)?;
            list.push_str(&format!("{rel}\t{}\n", u.label));
        }
        let path = dir.join(format!("{name}.list"));
        fs::write(&path, list).map_err(|e| Error::io(&path, e))
    }

    /// Read a list of `relative/path.fmat<TAB>label` lines. A `# classes K`
    /// header fixes the class count; otherwise it is one past the largest label.
    pub fn read_list(path: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let mut utterances = Vec::new();
        let mut classes = None;
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix("# classes") {
                classes = Some(rest.trim().parse::<usize>().map_err(|_| {
                    Error::format(
                        "utterance list",
                        format!("{}:{}: bad class count", path.display(), n + 1),
                    )
                })?);
                continue;
            }
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let (Some(file), Some(label), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::format(
                    "utterance list",
                    format!("{}:{}: expected `path label`", path.display(), n + 1),
                ));
            };
            let label = label.parse::<usize>().map_err(|_| {
                Error::format(
                    "utterance list",
                    format!("{}:{}: bad label `{label}`", path.display(), n + 1),
                )
            })?;
            utterances.push(Utterance {
                features: read_fmat(&base.join(file))?,
                label,
            });
        }
        let max_label = utterances.iter().map(|u| u.label + 1).max().unwrap_or(0);
        Ok(Dataset {
            num_classes: classes.unwrap_or(max_label).max(max_label),
            utterances,
        })
    }
}

/// Parameters of [`synth_dataset`].
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub num_utterances: usize,
    pub frames: usize,
    pub feature_dim: usize,
    /// Envelope period in frames for each class; empty means geometric spacing from 5 to 80.
    pub periods: Vec<f64>,
    pub noise: f64,
    /// How far each class pattern departs from the shared base pattern.
    pub pattern_spread: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_classes: 3,
            num_utterances: 150,
            frames: 120,
            feature_dim: 8,
            periods: vec![5.0, 20.0, 80.0],
            noise: 0.8,
            pattern_spread: 0.1,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn class_periods(&self) -> Vec<f64> {
        if !self.periods.is_empty() {
            return self.periods.clone();
        }
        let k = self.num_classes;
        (0..k)
            .map(|i| {
                let frac = if k > 1 { i as f64 / (k - 1) as f64 } else { 0.0 };
                5.0 * 16f64.powf(frac)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub data: Dataset,
    pub class_periods: Vec<f64>,
    /// `[K, F]` spatial pattern modulated by each class envelope.
    pub patterns: Tensor<f32>,
}

/// Utterance `i` has class `i mod K`. Frame `t` of a class-`k` utterance is
/// `env_k(t) · g_k + noise · ε`, where `env_k(t) = (1 + sin(2πt/P_k + φ)) / 2`
/// with a random phase `φ`, and `g_k` mixes a shared base pattern with a
/// class-specific one.
pub fn synth_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    if spec.num_classes < 2 {
        return Err(Error::config("synthetic data needs at least 2 classes"));
    }
    let periods = spec.class_periods();
    if periods.len() != spec.num_classes {
        return Err(Error::config(format!(
            "{} class periods given for {} classes",
            periods.len(),
            spec.num_classes
        )));
    }
    if periods.iter().any(|&p| !(p > 0.0)) || spec.frames == 0 || spec.feature_dim == 0 {
        return Err(Error::config("periods, frames and feature_dim must be positive"));
    }
    let (k, f) = (spec.num_classes, spec.feature_dim);
    let mut prng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, "synth/patterns"));
    let base: Vec<f64> = (0..f).map(|_| prng.gen_range(0.5..1.5)).collect();
    let patterns = Tensor::from_fn(&[k, f], |i| {
        let own: f64 = prng.gen_range(-1.0..1.0);
        (base[i % f] + spec.pattern_spread * own) as f32
    });
    let utterances = (0..spec.num_utterances)
        .map(|i| {
            let label = i % k;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &format!("synth/utt{i}")));
            let phase = rng.gen_range(0.0..std::f64::consts::TAU);
            let g = patterns.row(label);
            let omega = std::f64::consts::TAU / periods[label];
            let mut data = Vec::with_capacity(spec.frames * f);
            for t in 0..spec.frames {
                let env = 0.5 * (1.0 + (omega * t as f64 + phase).sin());
                for &gf in g {
                    let eps: f64 = StandardNormal.sample(&mut rng);
                    data.push((env * gf as f64 + spec.noise * eps) as f32);
                }
            }
            Ok(Utterance {
                features: Tensor::from_vec(&[spec.frames, f], data)?,
                label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthDataset {
        data: Dataset {
            utterances,
            num_classes: k,
        },
        class_periods: periods,
        patterns,
    })
}
