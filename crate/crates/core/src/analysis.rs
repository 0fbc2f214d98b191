//! Static properties of a [`ModelConfig`] computed without building it.

use crate::model_config::{ModelConfig, StemKind};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GridAlignment {
    pub rate: usize,
    pub per_stream: Vec<bool>,
    pub all_aligned: bool,
}

/// Stream `m` is aligned when its dilation is a multiple of `rate`.
pub fn check_grid_alignment(config: &ModelConfig, rate: usize) -> GridAlignment {
    let per_stream: Vec<bool> = config.streams.iter().map(|s| s.grid_aligned(rate)).collect();
    GridAlignment {
        rate,
        all_aligned: per_stream.iter().all(|&a| a),
        per_stream,
    }
}

/// Receptive field of a stack of `layers` three-tap layers at dilation `r`.
pub fn stack_receptive_field(layers: usize, dilation: usize) -> usize {
    2 * layers * dilation + 1
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReceptiveField {
    pub stem: usize,
    pub per_stream: Vec<usize>,
    /// Frames of input feeding one output frame.
    pub total: usize,
    /// Frames on each side of the output frame's center.
    pub left: usize,
    pub right: usize,
}

pub fn receptive_field(config: &ModelConfig) -> ReceptiveField {
    let stem = config.stem_context() + 1;
    let per_stream: Vec<usize> = config
        .streams
        .iter()
        .map(|s| stack_receptive_field(s.num_layers, s.dilation))
        .collect();
    let max_stream = per_stream.iter().copied().max().unwrap_or(1);
    let total = stem + max_stream - 1;
    ReceptiveField {
        stem,
        per_stream,
        total,
        left: (total - 1) / 2,
        right: (total - 1) / 2,
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub total: usize,
    /// `(module, count)` in the order stem, stream0.., combiner, head.
    pub breakdown: Vec<(String, usize)>,
}

fn affine_params(d_in: usize, d_out: usize) -> usize {
    d_in * d_out + d_out
}

/// Scalar count of every named parameter tensor the model would own.
pub fn count_parameters(config: &ModelConfig) -> ParamCount {
    let stem = match config.stem.kind {
        StemKind::Tdnnf => config.stem_layer_configs().iter().map(|c| c.param_count()).sum(),
        StemKind::Conv2d => {
            let mut cin = 1;
            let mut n = 0;
            for &cout in &config.stem.channels {
                n += 9 * cin * cout + cout + 2 * cout;
                cin = cout;
            }
            n
        }
    };
    let mut breakdown = vec![("stem".to_string(), stem)];
    for m in 0..config.streams.len() {
        let n = config.stream_layer_configs(m).iter().map(|c| c.param_count()).sum();
        breakdown.push((format!("stream{m}"), n));
    }
    breakdown.push(("combiner".to_string(), 2 * config.concat_dim()));
    breakdown.push((
        "head".to_string(),
        affine_params(config.concat_dim(), config.head_dim) + affine_params(config.head_dim, config.output_dim),
    ));
    ParamCount {
        total: breakdown.iter().map(|(_, n)| n).sum(),
        breakdown,
    }
}

/// Everything `analyze` reports for a config.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Analysis {
    pub streams: String,
    pub alignment: GridAlignment,
    pub receptive_field: ReceptiveField,
    pub parameters: ParamCount,
    pub min_frames: usize,
}

pub fn analyze(config: &ModelConfig) -> Analysis {
    Analysis {
        streams: config.notation(),
        alignment: check_grid_alignment(config, config.subsample_rate),
        receptive_field: receptive_field(config),
        parameters: count_parameters(config),
        min_frames: config.min_frames(),
    }
}
