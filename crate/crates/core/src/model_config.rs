//! Declarative description of a multistream network.

use crate::error::{Error, Result};
use crate::frontend::stem::{stem_freq_extents, stem_min_freq, DEFAULT_STEM_CHANNELS};
use crate::layers::BatchNormConfig;
use crate::tdnnf::TdnnfConfig;

pub const DEFAULT_STREAM_LAYERS: usize = 17;
pub const DEFAULT_STEM_LAYERS: usize = 5;
pub const DEFAULT_DROPOUT: f64 = 0.1;
pub const DEFAULT_SKIP_SCALE: f64 = 0.66;
pub const DEFAULT_SUBSAMPLE_RATE: usize = 3;
pub const DEFAULT_OUTPUT_DIM: usize = 512;
pub const MAX_BOTTLENECK: usize = 160;

/// Bottleneck width used when a config does not pin one: half the layer
/// width, capped at 160 (so 160 for both 512- and 1536-wide layers).
pub fn default_bottleneck(dim: usize) -> usize {
    (dim / 2).clamp(1, MAX_BOTTLENECK)
}

/// Parse dash notation such as `"6-9-12"` into dilation rates.
pub fn parse_dilations(text: &str) -> Result<Vec<usize>> {
    let rates: Result<Vec<usize>> = text
        .trim()
        .split('-')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&r| r > 0)
                .ok_or_else(|| Error::config(format!("bad dilation `{p}` in stream list `{text}`")))
        })
        .collect();
    let rates = rates?;
    if rates.is_empty() {
        return Err(Error::config("stream list is empty"));
    }
    Ok(rates)
}

pub fn format_dilations(rates: &[usize]) -> String {
    rates.iter().map(usize::to_string).collect::<Vec<_>>().join("-")
}

/// One parallel stack of TDNN-F layers sharing a dilation rate.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamSpec {
    pub dilation: usize,
    pub num_layers: usize,
    pub embed_dim: usize,
    pub bottleneck_dim: usize,
    pub dropout_p: f64,
}

impl StreamSpec {
    pub fn new(dilation: usize, embed_dim: usize) -> Self {
        StreamSpec {
            dilation,
            num_layers: DEFAULT_STREAM_LAYERS,
            embed_dim,
            bottleneck_dim: default_bottleneck(embed_dim),
            dropout_p: DEFAULT_DROPOUT,
        }
    }

    /// `r mod S == 0`.
    pub fn grid_aligned(&self, subsample_rate: usize) -> bool {
        self.dilation.is_multiple_of(subsample_rate)
    }

    /// Frames consumed by the whole stack.
    pub fn context(&self) -> usize {
        2 * self.num_layers * self.dilation
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StemKind {
    /// TDNN-F layers at dilation 1.
    Tdnnf,
    /// 3×3 conv2d blocks over the spectrogram.
    Conv2d,
}

impl StemKind {
    pub fn as_str(self) -> &'static str {
        match self {
            StemKind::Tdnnf => "tdnnf",
            StemKind::Conv2d => "conv2d",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "tdnnf" => Ok(StemKind::Tdnnf),
            "conv2d" => Ok(StemKind::Conv2d),
            other => Err(Error::config(format!(
                "unknown stem kind `{other}` (expected tdnnf or conv2d)"
            ))),
        }
    }
}

/// Shared layers before the stream branch point.
#[derive(Clone, Debug, PartialEq)]
pub struct StemSpec {
    pub kind: StemKind,
    pub layers: usize,
    /// Width of TDNN-F stem layers.
    pub dim: usize,
    pub bottleneck_dim: usize,
    pub dropout_p: f64,
    /// Per-layer channel widths of the conv2d stem.
    pub channels: Vec<usize>,
}

impl StemSpec {
    pub fn tdnnf(layers: usize, dim: usize) -> Self {
        StemSpec {
            kind: StemKind::Tdnnf,
            layers,
            dim,
            bottleneck_dim: default_bottleneck(dim),
            dropout_p: DEFAULT_DROPOUT,
            channels: DEFAULT_STEM_CHANNELS.to_vec(),
        }
    }

    pub fn conv2d() -> Self {
        StemSpec {
            kind: StemKind::Conv2d,
            layers: DEFAULT_STEM_CHANNELS.len(),
            channels: DEFAULT_STEM_CHANNELS.to_vec(),
            ..Self::tdnnf(DEFAULT_STEM_LAYERS, 512)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub stem: StemSpec,
    pub streams: Vec<StreamSpec>,
    pub subsample_rate: usize,
    pub combiner_dropout: f64,
    pub skip_scale: f64,
    pub bn: BatchNormConfig,
    /// Hidden width of the two-layer projection head.
    pub head_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Documented defaults: a five-layer TDNN-F stem as wide as the streams,
    /// 17 layers per stream, head hidden width equal to the concat width.
    pub fn multistream(input_dim: usize, dilations: &[usize], embed_dim: usize) -> Self {
        let streams: Vec<StreamSpec> = dilations.iter().map(|&r| StreamSpec::new(r, embed_dim)).collect();
        let concat = embed_dim * streams.len();
        ModelConfig {
            input_dim,
            stem: StemSpec::tdnnf(DEFAULT_STEM_LAYERS, embed_dim),
            streams,
            subsample_rate: DEFAULT_SUBSAMPLE_RATE,
            combiner_dropout: DEFAULT_DROPOUT,
            skip_scale: DEFAULT_SKIP_SCALE,
            bn: BatchNormConfig::default(),
            head_dim: concat,
            output_dim: DEFAULT_OUTPUT_DIM,
            seed: 0,
        }
    }

    /// [`ModelConfig::multistream`] from dash notation.
    pub fn from_notation(input_dim: usize, streams: &str, embed_dim: usize) -> Result<Self> {
        Ok(Self::multistream(input_dim, &parse_dilations(streams)?, embed_dim))
    }

    pub fn dilations(&self) -> Vec<usize> {
        self.streams.iter().map(|s| s.dilation).collect()
    }

    pub fn notation(&self) -> String {
        format_dilations(&self.dilations())
    }

    pub fn concat_dim(&self) -> usize {
        self.streams.iter().map(|s| s.embed_dim).sum()
    }

    /// Set every stream to `layers` layers.
    pub fn with_stream_layers(mut self, layers: usize) -> Self {
        self.streams.iter_mut().for_each(|s| s.num_layers = layers);
        self
    }

    /// Set every dropout probability (stem, streams, combiner) to `p`.
    pub fn with_dropout(mut self, p: f64) -> Self {
        self.stem.dropout_p = p;
        self.streams.iter_mut().for_each(|s| s.dropout_p = p);
        self.combiner_dropout = p;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::config("input_dim must be positive"));
        }
        if self.streams.is_empty() {
            return Err(Error::config("a model needs at least one stream"));
        }
        let layers = self.streams[0].num_layers;
        if self.streams.iter().any(|s| s.num_layers != layers) {
            return Err(Error::config("all streams must share num_layers"));
        }
        if self.subsample_rate == 0 {
            return Err(Error::config("subsample_rate must be positive"));
        }
        if self.head_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("head_dim and output_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.combiner_dropout) {
            return Err(Error::config("combiner dropout must be in [0, 1)"));
        }
        if self.stem.kind == StemKind::Conv2d {
            if self.stem.channels.len() != self.stem.layers || self.stem.channels.contains(&0) {
                return Err(Error::config(format!(
                    "conv2d stem lists {} channel widths for {} layers",
                    self.stem.channels.len(),
                    self.stem.layers
                )));
            }
            if self.stem.layers == 0 {
                return Err(Error::config("conv2d stem needs at least one layer"));
            }
            if self.input_dim < stem_min_freq(self.stem.layers) {
                return Err(Error::config(format!(
                    "conv2d stem needs at least {} mel bins, got {}",
                    stem_min_freq(self.stem.layers),
                    self.input_dim
                )));
            }
        }
        for cfg in self.stem_layer_configs() {
            cfg.validate()?;
        }
        for m in 0..self.streams.len() {
            for cfg in self.stream_layer_configs(m) {
                cfg.validate()?;
            }
        }
        Ok(())
    }

    fn tdnnf(&self, d_in: usize, d_out: usize, bottleneck: usize, dilation: usize, dropout_p: f64) -> TdnnfConfig {
        TdnnfConfig {
            d_in,
            d_out,
            bottleneck,
            dilation,
            dropout_p,
            skip: d_in == d_out,
            skip_scale: self.skip_scale,
            bn: self.bn,
        }
    }

    /// Layer configs of a TDNN-F stem (empty for a conv2d stem). The first
    /// layer projects `input_dim → stem.dim` without an identity skip unless
    /// the widths agree; its bottleneck is clamped below `input_dim`.
    pub fn stem_layer_configs(&self) -> Vec<TdnnfConfig> {
        if self.stem.kind != StemKind::Tdnnf {
            return Vec::new();
        }
        let s = &self.stem;
        (0..s.layers)
            .map(|i| {
                if i == 0 {
                    let b = s.bottleneck_dim.min((self.input_dim / 2).max(1));
                    self.tdnnf(self.input_dim, s.dim, b, 1, s.dropout_p)
                } else {
                    self.tdnnf(s.dim, s.dim, s.bottleneck_dim, 1, s.dropout_p)
                }
            })
            .collect()
    }

    /// Width of the features handed to every stream.
    pub fn stem_output_dim(&self) -> usize {
        match self.stem.kind {
            StemKind::Tdnnf if self.stem.layers == 0 => self.input_dim,
            StemKind::Tdnnf => self.stem.dim,
            StemKind::Conv2d => {
                let f = stem_freq_extents(self.input_dim, self.stem.layers);
                f.last().copied().unwrap_or(self.input_dim) * self.stem.channels.last().copied().unwrap_or(1)
            }
        }
    }

    pub fn stream_layer_configs(&self, m: usize) -> Vec<TdnnfConfig> {
        let s = &self.streams[m];
        let d0 = self.stem_output_dim();
        (0..s.num_layers)
            .map(|i| {
                let d_in = if i == 0 { d0 } else { s.embed_dim };
                self.tdnnf(d_in, s.embed_dim, s.bottleneck_dim, s.dilation, s.dropout_p)
            })
            .collect()
    }

    /// Frames consumed by the stem.
    pub fn stem_context(&self) -> usize {
        match self.stem.kind {
            StemKind::Tdnnf => self.stem_layer_configs().iter().map(TdnnfConfig::context).sum(),
            StemKind::Conv2d => 0,
        }
    }

    pub fn max_stream_context(&self) -> usize {
        self.streams.iter().map(StreamSpec::context).max().unwrap_or(0)
    }

    /// Shortest input that yields one output frame.
    pub fn min_frames(&self) -> usize {
        self.stem_context() + self.max_stream_context() + 1
    }

    /// Output frames for an input of `frames` frames.
    pub fn output_frames(&self, frames: usize) -> Result<usize> {
        let need = self.min_frames();
        if frames < need {
            return Err(Error::InsufficientContext {
                op: "model_forward",
                required: need,
                actual: frames,
            });
        }
        Ok(frames + 1 - need)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dash_notation_round_trip() {
        assert_eq!(parse_dilations("6-9-12").unwrap(), vec![6, 9, 12]);
        assert_eq!(format_dilations(&[1, 2, 3]), "1-2-3");
        assert!(parse_dilations("6--9").is_err());
        assert!(parse_dilations("0-3").is_err());
        assert!(parse_dilations("a").is_err());
    }

    #[test]
    fn default_bottlenecks() {
        assert_eq!(default_bottleneck(1536), 160);
        assert_eq!(default_bottleneck(512), 160);
        assert_eq!(default_bottleneck(8), 4);
    }

    #[test]
    fn default_config_shapes() {
        let cfg = ModelConfig::from_notation(40, "6-9-12", 512).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.streams.len(), 3);
        assert_eq!(cfg.concat_dim(), 1536);
        assert_eq!(cfg.stem_context(), 10);
        assert_eq!(cfg.max_stream_context(), 408);
        assert_eq!(cfg.min_frames(), 419);
        assert_eq!(cfg.output_frames(419).unwrap(), 1);
        assert!(matches!(
            cfg.output_frames(418),
            Err(Error::InsufficientContext { required: 419, .. })
        ));
    }

    #[test]
    fn validation_errors() {
        let mut cfg = ModelConfig::from_notation(40, "3-6", 16).unwrap();
        cfg.streams[1].num_layers = 3;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::from_notation(40, "3", 16).unwrap();
        cfg.streams.clear();
        assert!(cfg.validate().unwrap_err().to_string().contains("at least one stream"));
        let mut cfg = ModelConfig::from_notation(40, "3", 16).unwrap();
        cfg.streams[0].bottleneck_dim = 16;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::from_notation(6, "3", 16).unwrap();
        cfg.stem = StemSpec::conv2d();
        assert!(cfg.validate().is_err());
    }
}
