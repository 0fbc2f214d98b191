//! INI-style configuration files with `[model]`, `[train]`, `[data]` and
//! `[augment]` sections. Unknown sections and keys are rejected.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ini::Ini;

use crate::error::{Error, Result};
use crate::frontend::specaugment::SpecAugmentPolicy;
use crate::layers::BatchNormConfig;
use crate::model_config::{default_bottleneck, format_dilations, ModelConfig, StemKind, StemSpec, StreamSpec};
use crate::trainer::data::SynthSpec;
use crate::trainer::TrainConfig;

/// Key/value pairs of one section with unknown-key checking.
pub struct Section {
    name: String,
    values: BTreeMap<String, String>,
}

impl Section {
    pub fn new(name: &str, values: BTreeMap<String, String>) -> Self {
        Section {
            name: name.to_string(),
            values,
        }
    }

    pub fn check_keys(&self, allowed: &[&str]) -> Result<()> {
        match self.values.keys().find(|k| !allowed.contains(&k.as_str())) {
            Some(key) => Err(Error::UnknownKey {
                section: self.name.clone(),
                key: key.clone(),
            }),
            None => Ok(()),
        }
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| Error::config(format!("[{}] {key} = `{v}` is not a valid value", self.name)))
            })
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(|p| {
                        p.trim()
                            .parse::<T>()
                            .map_err(|_| Error::config(format!("[{}] {key}: bad list entry `{p}`", self.name)))
                    })
                    .collect()
            })
            .transpose()
    }
}

/// Parse INI text into named sections. Keys outside any section are an error.
pub fn parse_sections(text: &str) -> Result<BTreeMap<String, Section>> {
    let ini = Ini::load_from_str(text).map_err(|e| Error::config(format!("config syntax: {e}")))?;
    let mut out = BTreeMap::new();
    for (name, props) in ini.iter() {
        let values: BTreeMap<String, String> = props.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        match name {
            None if values.is_empty() => {}
            None => {
                let key = values.keys().next().cloned().unwrap_or_default();
                return Err(Error::config(format!("key `{key}` appears before any [section]")));
            }
            Some(n) => {
                out.insert(n.to_string(), Section::new(n, values));
            }
        }
    }
    Ok(out)
}

const MODEL_KEYS: &[&str] = &[
    "input_dim",
    "streams",
    "embed_dim",
    "bottleneck_dim",
    "num_layers",
    "stream_dropout",
    "stem",
    "stem_layers",
    "stem_dim",
    "stem_bottleneck",
    "stem_dropout",
    "stem_channels",
    "subsample_rate",
    "combiner_dropout",
    "skip_scale",
    "bn_momentum",
    "bn_epsilon",
    "head_dim",
    "output_dim",
    "seed",
];

fn per_stream(section: &Section, key: &str, n: usize, default: impl Fn(usize) -> usize) -> Result<Vec<usize>> {
    match section.get_list::<usize>(key)? {
        None => Ok((0..n).map(default).collect()),
        Some(v) if v.len() == 1 => Ok(vec![v[0]; n]),
        Some(v) if v.len() == n => Ok(v),
        Some(v) => Err(Error::config(format!(
            "[model] {key} lists {} values for {n} streams",
            v.len()
        ))),
    }
}

pub fn model_from_section(s: &Section) -> Result<ModelConfig> {
    s.check_keys(MODEL_KEYS)?;
    let mut c = ModelConfig::from_notation(s.get_or("input_dim", 40)?, s.raw("streams").unwrap_or("6-9-12"), 512)?;
    let n = c.streams.len();
    let dims = per_stream(s, "embed_dim", n, |_| 512)?;
    let bottlenecks = per_stream(s, "bottleneck_dim", n, |m| default_bottleneck(dims[m]))?;
    let layers = s.get_or("num_layers", c.streams[0].num_layers)?;
    let dropout = s.get_or("stream_dropout", c.streams[0].dropout_p)?;
    let rates = c.dilations();
    c.streams = (0..n)
        .map(|m| StreamSpec {
            dilation: rates[m],
            num_layers: layers,
            embed_dim: dims[m],
            bottleneck_dim: bottlenecks[m],
            dropout_p: dropout,
        })
        .collect();
    let kind = StemKind::parse(s.raw("stem").unwrap_or("tdnnf"))?;
    let stem_dim = s.get_or("stem_dim", dims[0])?;
    let mut stem = match kind {
        StemKind::Tdnnf => StemSpec::tdnnf(s.get_or("stem_layers", 5)?, stem_dim),
        StemKind::Conv2d => StemSpec::conv2d(),
    };
    stem.dim = stem_dim;
    stem.bottleneck_dim = s.get_or("stem_bottleneck", default_bottleneck(stem_dim))?;
    stem.dropout_p = s.get_or("stem_dropout", stem.dropout_p)?;
    if let Some(ch) = s.get_list::<usize>("stem_channels")? {
        stem.channels = ch;
    }
    if kind == StemKind::Conv2d {
        stem.layers = s.get_or("stem_layers", stem.channels.len())?;
    }
    c.stem = stem;
    c.subsample_rate = s.get_or("subsample_rate", c.subsample_rate)?;
    c.combiner_dropout = s.get_or("combiner_dropout", c.combiner_dropout)?;
    c.skip_scale = s.get_or("skip_scale", c.skip_scale)?;
    c.bn = BatchNormConfig {
        momentum: s.get_or("bn_momentum", c.bn.momentum)?,
        epsilon: s.get_or("bn_epsilon", c.bn.epsilon)?,
    };
    c.head_dim = s.get_or("head_dim", c.concat_dim())?;
    c.output_dim = s.get_or("output_dim", c.output_dim)?;
    c.seed = s.get_or("seed", c.seed)?;
    c.validate()?;
    Ok(c)
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn same_or_list(v: &[usize]) -> String {
    if v.windows(2).all(|w| w[0] == w[1]) {
        v[0].to_string()
    } else {
        join(v)
    }
}

/// `[model]` section text that [`model_from_section`] parses back to `c`.
/// Per-stream dropout must be uniform.
pub fn model_to_ini(c: &ModelConfig) -> String {
    let mut s = String::from("[model]\n");
    let dims: Vec<usize> = c.streams.iter().map(|x| x.embed_dim).collect();
    let bns: Vec<usize> = c.streams.iter().map(|x| x.bottleneck_dim).collect();
    let kv: Vec<(&str, String)> = vec![
        ("input_dim", c.input_dim.to_string()),
        ("streams", format_dilations(&c.dilations())),
        ("embed_dim", same_or_list(&dims)),
        ("bottleneck_dim", same_or_list(&bns)),
        ("num_layers", c.streams[0].num_layers.to_string()),
        ("stream_dropout", c.streams[0].dropout_p.to_string()),
        ("stem", c.stem.kind.as_str().to_string()),
        ("stem_layers", c.stem.layers.to_string()),
        ("stem_dim", c.stem.dim.to_string()),
        ("stem_bottleneck", c.stem.bottleneck_dim.to_string()),
        ("stem_dropout", c.stem.dropout_p.to_string()),
        ("stem_channels", join(&c.stem.channels)),
        ("subsample_rate", c.subsample_rate.to_string()),
        ("combiner_dropout", c.combiner_dropout.to_string()),
        ("skip_scale", c.skip_scale.to_string()),
        ("bn_momentum", c.bn.momentum.to_string()),
        ("bn_epsilon", c.bn.epsilon.to_string()),
        ("head_dim", c.head_dim.to_string()),
        ("output_dim", c.output_dim.to_string()),
        ("seed", c.seed.to_string()),
    ];
    for (k, v) in kv {
        let _ = writeln!(s, "{k} = {v}");
    }
    s
}

const TRAIN_KEYS: &[&str] = &[
    "lr_start",
    "lr_end",
    "epochs",
    "minibatch",
    "momentum",
    "constraint_interval",
    "seed",
];

pub fn train_from_section(s: &Section) -> Result<TrainConfig> {
    s.check_keys(TRAIN_KEYS)?;
    let d = TrainConfig::default();
    let c = TrainConfig {
        lr_start: s.get_or("lr_start", d.lr_start)?,
        lr_end: s.get_or("lr_end", d.lr_end)?,
        epochs: s.get_or("epochs", d.epochs)?,
        minibatch: s.get_or("minibatch", d.minibatch)?,
        momentum: s.get_or("momentum", d.momentum)?,
        constraint_interval: s.get_or("constraint_interval", d.constraint_interval)?,
        seed: s.get_or("seed", d.seed)?,
    };
    c.validate()?;
    Ok(c)
}

pub fn train_to_ini(c: &TrainConfig) -> String {
    format!(
        "[train]\nlr_start = {}\nlr_end = {}\nepochs = {}\nminibatch = {}\nmomentum = {}\nconstraint_interval = {}\nseed = {}\n",
        c.lr_start, c.lr_end, c.epochs, c.minibatch, c.momentum, c.constraint_interval, c.seed
    )
}

/// Where training data comes from.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    /// Utterance lists; when absent, a synthetic corpus is generated.
    pub train_list: Option<PathBuf>,
    pub heldout_list: Option<PathBuf>,
    pub synth: SynthSpec,
    /// Synthetic held-out utterances (generated with a different seed).
    pub synth_heldout: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train_list: None,
            heldout_list: None,
            synth: SynthSpec::default(),
            synth_heldout: 30,
        }
    }
}

const DATA_KEYS: &[&str] = &[
    "train_list",
    "heldout_list",
    "synth_classes",
    "synth_utterances",
    "synth_heldout",
    "synth_frames",
    "synth_periods",
    "synth_noise",
    "synth_spread",
    "synth_seed",
];

/// Relative list paths resolve against `base` (the config file's directory).
pub fn data_from_section(s: &Section, base: &Path) -> Result<DataConfig> {
    s.check_keys(DATA_KEYS)?;
    let d = DataConfig::default();
    let path = |k: &str| s.raw(k).map(|p| base.join(p));
    let mut synth = SynthSpec {
        num_classes: s.get_or("synth_classes", d.synth.num_classes)?,
        num_utterances: s.get_or("synth_utterances", d.synth.num_utterances)?,
        frames: s.get_or("synth_frames", d.synth.frames)?,
        noise: s.get_or("synth_noise", d.synth.noise)?,
        pattern_spread: s.get_or("synth_spread", d.synth.pattern_spread)?,
        seed: s.get_or("synth_seed", d.synth.seed)?,
        ..d.synth.clone()
    };
    synth.periods = match s.get_list::<f64>("synth_periods")? {
        Some(p) => p,
        None if synth.num_classes == d.synth.num_classes => d.synth.periods.clone(),
        None => Vec::new(),
    };
    Ok(DataConfig {
        train_list: path("train_list"),
        heldout_list: path("heldout_list"),
        synth,
        synth_heldout: s.get_or("synth_heldout", d.synth_heldout)?,
    })
}

const AUGMENT_KEYS: &[&str] = &[
    "num_freq_masks",
    "num_time_masks",
    "max_freq_width",
    "max_time_width",
    "mask_value",
];

pub fn augment_from_section(s: &Section) -> Result<SpecAugmentPolicy> {
    s.check_keys(AUGMENT_KEYS)?;
    let d = SpecAugmentPolicy::default();
    Ok(SpecAugmentPolicy {
        num_freq_masks: s.get_or("num_freq_masks", d.num_freq_masks)?,
        num_time_masks: s.get_or("num_time_masks", d.num_time_masks)?,
        max_freq_width: s.get_or("max_freq_width", d.max_freq_width)?,
        max_time_width: s.get_or("max_time_width", d.max_time_width)?,
        mask_value: s.get_or("mask_value", d.mask_value)?,
        seed: d.seed,
    })
}

/// A whole configuration file. Missing sections take their defaults.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfigFile {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: SpecAugmentPolicy,
    /// Whether `[train] seed` was given explicitly.
    pub seed_given: bool,
}

impl ConfigFile {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        const SECTIONS: [&str; 4] = ["model", "train", "data", "augment"];
        let mut sections = parse_sections(text)?;
        if let Some(name) = sections.keys().find(|k| !SECTIONS.contains(&k.as_str())) {
            return Err(Error::config(format!("unknown section [{name}]")));
        }
        for n in SECTIONS {
            sections
                .entry(n.to_string())
                .or_insert_with(|| Section::new(n, BTreeMap::new()));
        }
        Ok(ConfigFile {
            model: model_from_section(&sections["model"])?,
            train: train_from_section(&sections["train"])?,
            seed_given: sections["train"].raw("seed").is_some(),
            data: data_from_section(&sections["data"], base)?,
            augment: augment_from_section(&sections["augment"])?,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}
