//! The multistream network: shared stem, parallel dilated TDNN-F stacks,
//! concat combiner and a two-layer projection head.

use crate::error::{Error, Result};
use crate::frontend::stem::{build_conv2d_stem, Conv2dStem};
use crate::init::derive_seed;
use crate::kernels::{concat_channels, split_channels};
use crate::layers::{
    join_name, Affine, BatchNorm, BufferVisitor, BufferVisitorMut, Dropout, Layer, Mode, ParamVisitor, ParamVisitorMut,
    Relu,
};
use crate::model_config::{ModelConfig, StemKind, StreamSpec};
use crate::par;
use crate::tdnnf::TdnnfLayer;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug)]
pub enum Stem<T> {
    Tdnnf(Vec<TdnnfLayer<T>>),
    Conv2d(Conv2dStem<T>),
}

impl<T: Real> Stem<T> {
    fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        match self {
            Stem::Tdnnf(layers) => {
                let mut h = x.clone();
                for l in layers {
                    h = l.forward(&h, mode)?;
                }
                Ok(h)
            }
            Stem::Conv2d(s) => s.forward(x, mode),
        }
    }

    fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Stem::Tdnnf(layers) => {
                let mut h = x.clone();
                for l in layers {
                    h = l.infer(&h)?;
                }
                Ok(h)
            }
            Stem::Conv2d(s) => s.infer(x),
        }
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Stem::Tdnnf(layers) => {
                let mut g = g.clone();
                for l in layers.iter_mut().rev() {
                    g = l.backward(&g)?;
                }
                Ok(g)
            }
            Stem::Conv2d(s) => s.backward(g),
        }
    }

    fn as_layers(&self) -> Vec<&dyn Layer<T>> {
        match self {
            Stem::Tdnnf(layers) => layers.iter().map(|l| l as &dyn Layer<T>).collect(),
            Stem::Conv2d(s) => vec![s as &dyn Layer<T>],
        }
    }

    fn as_layers_mut(&mut self) -> Vec<&mut dyn Layer<T>> {
        match self {
            Stem::Tdnnf(layers) => layers.iter_mut().map(|l| l as &mut dyn Layer<T>).collect(),
            Stem::Conv2d(s) => vec![s as &mut dyn Layer<T>],
        }
    }

    /// Sub-module name of the `i`-th entry of [`Stem::as_layers`].
    fn entry_name(&self, i: usize) -> String {
        match self {
            Stem::Tdnnf(_) => format!("stem.l{i}"),
            Stem::Conv2d(_) => "stem".to_string(),
        }
    }
}

/// One dilated TDNN-F stack.
#[derive(Clone, Debug)]
pub struct Stream<T> {
    pub spec: StreamSpec,
    pub layers: Vec<TdnnfLayer<T>>,
}

impl<T: Real> Stream<T> {
    fn forward(&mut self, h: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut y = h.clone();
        for l in &mut self.layers {
            y = l.forward(&y, mode)?;
        }
        Ok(y)
    }

    /// Inference with every layer's dilation divided by `rate`.
    fn infer_scaled(&self, h: &Tensor<T>, rate: usize) -> Result<Tensor<T>> {
        let mut y = h.clone();
        for l in &self.layers {
            y = l.infer_with_dilation(&y, l.config.dilation / rate)?;
        }
        Ok(y)
    }

    fn backward(&mut self, g: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = g.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }
}

#[derive(Clone, Debug)]
struct Crop {
    /// Stem output frames.
    t_stem: usize,
    /// Per-stream output frames before cropping.
    t_stream: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    config: ModelConfig,
    pub stem: Stem<T>,
    pub streams: Vec<Stream<T>>,
    combiner_relu: Relu<T>,
    pub combiner_bn: BatchNorm<T>,
    combiner_dropout: Dropout<T>,
    pub fc1: Affine<T>,
    head_relu: Relu<T>,
    pub fc2: Affine<T>,
    crop: Option<Crop>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let seed = config.seed;
        let stem = match config.stem.kind {
            StemKind::Tdnnf => Stem::Tdnnf(
                config
                    .stem_layer_configs()
                    .into_iter()
                    .enumerate()
                    .map(|(i, c)| TdnnfLayer::new(c, seed, &format!("stem.l{i}")))
                    .collect::<Result<_>>()?,
            ),
            StemKind::Conv2d => Stem::Conv2d(build_conv2d_stem(
                config.input_dim,
                &config.stem.channels,
                config.bn,
                seed,
                "stem",
            )?),
        };
        let streams = (0..config.streams.len())
            .map(|m| {
                let layers = config
                    .stream_layer_configs(m)
                    .into_iter()
                    .enumerate()
                    .map(|(i, c)| TdnnfLayer::new(c, seed, &format!("stream{m}.l{i}")))
                    .collect::<Result<_>>()?;
                Ok(Stream {
                    spec: config.streams[m].clone(),
                    layers,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let concat = config.concat_dim();
        Ok(Model {
            combiner_relu: Relu::new(),
            combiner_bn: BatchNorm::new(concat, config.bn),
            combiner_dropout: Dropout::new(config.combiner_dropout, derive_seed(seed, "combiner.dropout"))?,
            fc1: Affine::new(concat, config.head_dim, seed, "head.fc1"),
            head_relu: Relu::new(),
            fc2: Affine::new(config.head_dim, config.output_dim, seed, "head.fc2"),
            stem,
            streams,
            config,
            crop: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_frames(&self, op: &'static str, x: &Tensor<T>) -> Result<()> {
        if x.rank() != 3 || x.dim(2) != self.config.input_dim {
            return Err(Error::Shape {
                op,
                dim: "input feature dim",
                expected: self.config.input_dim,
                actual: if x.rank() == 3 { x.dim(2) } else { x.channels() },
            });
        }
        let need = self.config.min_frames();
        if x.dim(1) < need {
            return Err(Error::InsufficientContext {
                op,
                required: need,
                actual: x.dim(1),
            });
        }
        Ok(())
    }

    fn check_branch(&self, op: &'static str, h: &Tensor<T>) -> Result<()> {
        let d = self.config.stem_output_dim();
        if h.rank() != 3 || h.dim(2) != d {
            return Err(Error::Shape {
                op,
                dim: "branch feature dim",
                expected: d,
                actual: h.channels(),
            });
        }
        let need = self.config.max_stream_context() + 1;
        if h.dim(1) < need {
            return Err(Error::InsufficientContext {
                op,
                required: need,
                actual: h.dim(1),
            });
        }
        Ok(())
    }

    /// Frames to drop at the front of stream `m` so all streams share the
    /// time index of the largest-context stream, divided by `rate`.
    fn crop_offset(&self, m: usize, rate: usize) -> usize {
        (self.config.max_stream_context() - self.streams[m].spec.context()) / 2 / rate
    }

    fn crop_and_concat(&self, outs: &[Tensor<T>], rate: usize) -> Tensor<T> {
        let len = outs.iter().map(|y| y.dim(1)).min().unwrap_or(0);
        let cropped: Vec<Tensor<T>> = outs
            .iter()
            .enumerate()
            .map(|(m, y)| y.slice_time(self.crop_offset(m, rate), len))
            .collect();
        concat_channels(&cropped.iter().collect::<Vec<_>>()).expect("stream outputs share batch and time")
    }

    fn head_infer(&self, concat: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.combiner_bn.infer(&self.combiner_relu.infer(concat)?)?;
        let z = self.combiner_dropout.infer(&z)?;
        self.fc2.infer(&self.head_relu.infer(&self.fc1.infer(&z)?)?)
    }

    /// Features at the branch point, `[B, T - stem_context, stem_output_dim]`.
    pub fn stem_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_frames("model_forward", x)?;
        self.stem.infer(x)
    }

    /// Pre-ReLU concat of all aligned stream outputs.
    pub fn concat_infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.stem_infer(x)?;
        self.branch_concat(&h, 1)
    }

    fn branch_concat(&self, h: &Tensor<T>, rate: usize) -> Result<Tensor<T>> {
        let outs = par::map(&self.streams, |_, s| s.infer_scaled(h, rate));
        let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(self.crop_and_concat(&outs, rate))
    }

    /// Inference from branch-point features.
    pub fn infer_from_branch(&self, h: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_branch("model_forward", h)?;
        self.head_infer(&self.branch_concat(h, 1)?)
    }

    pub fn check_alignment(&self, rate: usize) -> Result<()> {
        if rate == 0 {
            return Err(Error::config("sub-sampling rate must be positive"));
        }
        for (m, s) in self.streams.iter().enumerate() {
            if !s.spec.grid_aligned(rate) {
                return Err(Error::NotGridAligned {
                    stream: m,
                    dilation: s.spec.dilation,
                    rate,
                });
            }
        }
        Ok(())
    }

    /// Outputs only at every `rate`-th frame, computed on the decimated
    /// branch-point sequence. Equal to `infer(x)` strided by `rate`, bit for bit.
    pub fn infer_subsampled(&self, x: &Tensor<T>, rate: usize) -> Result<Tensor<T>> {
        self.check_alignment(rate)?;
        let h = self.stem_infer(x)?;
        self.infer_from_branch_subsampled(&h, rate)
    }

    /// [`Model::infer_subsampled`] from branch-point features. Only frames
    /// `0, rate, 2·rate, ...` of `h` are read.
    pub fn infer_from_branch_subsampled(&self, h: &Tensor<T>, rate: usize) -> Result<Tensor<T>> {
        self.check_alignment(rate)?;
        self.check_branch("subsampled_forward", h)?;
        let hs = if rate == 1 { h.clone() } else { h.stride_time(rate) };
        self.head_infer(&self.branch_concat(&hs, rate)?)
    }

    /// Single utterance `[T, input_dim] -> [T', output_dim]`.
    pub fn infer_utterance(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut shape = vec![1];
        shape.extend_from_slice(x.shape());
        let y = self.infer(&x.clone().reshape(&shape)?)?;
        let s = y.shape().to_vec();
        y.reshape(&s[1..])
    }

    pub fn tdnnf_layers(&self) -> impl Iterator<Item = &TdnnfLayer<T>> {
        let stem: &[TdnnfLayer<T>] = match &self.stem {
            Stem::Tdnnf(l) => l,
            Stem::Conv2d(_) => &[],
        };
        stem.iter().chain(self.streams.iter().flat_map(|s| s.layers.iter()))
    }

    pub fn tdnnf_layers_mut(&mut self) -> impl Iterator<Item = &mut TdnnfLayer<T>> {
        let stem: &mut [TdnnfLayer<T>] = match &mut self.stem {
            Stem::Tdnnf(l) => l,
            Stem::Conv2d(_) => &mut [],
        };
        stem.iter_mut()
            .chain(self.streams.iter_mut().flat_map(|s| s.layers.iter_mut()))
    }

    /// One semi-orthogonal update on every TDNN-F bottleneck.
    pub fn semi_orthogonal_step(&mut self) {
        let mut layers: Vec<&mut TdnnfLayer<T>> = self.tdnnf_layers_mut().collect();
        par::map_mut(&mut layers, |_, l| l.semi_orthogonal_step());
    }

    pub fn max_ortho_defect(&self) -> f64 {
        self.tdnnf_layers().map(TdnnfLayer::ortho_defect).fold(0.0, f64::max)
    }

    /// `(name, parameter count)` per top-level module: stem, each stream,
    /// combiner, head.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let mut out = vec![(
            "stem".to_string(),
            self.stem.as_layers().iter().map(|l| l.num_params()).sum(),
        )];
        for (m, s) in self.streams.iter().enumerate() {
            out.push((format!("stream{m}"), s.layers.iter().map(|l| l.num_params()).sum()));
        }
        out.push(("combiner".to_string(), self.combiner_bn.num_params()));
        out.push(("head".to_string(), self.fc1.num_params() + self.fc2.num_params()));
        out
    }
}

impl<T: Real> Layer<T> for Model<T> {
    fn kind(&self) -> &'static str {
        "multistream"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_frames("model_forward", input)?;
        let h = self.stem.forward(input, mode)?;
        let outs = par::map_mut(&mut self.streams, |_, s| s.forward(&h, mode));
        let outs = outs.into_iter().collect::<Result<Vec<_>>>()?;
        let concat = self.crop_and_concat(&outs, 1);
        self.crop = mode.is_training().then(|| Crop {
            t_stem: h.dim(1),
            t_stream: outs.iter().map(|y| y.dim(1)).collect(),
        });
        let z = self.combiner_relu.forward(&concat, mode)?;
        let z = self.combiner_bn.forward(&z, mode)?;
        let z = self.combiner_dropout.forward(&z, mode)?;
        let z = self.fc1.forward(&z, mode)?;
        let z = self.head_relu.forward(&z, mode)?;
        self.fc2.forward(&z, mode)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let h = self.stem_infer(input)?;
        self.head_infer(&self.branch_concat(&h, 1)?)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let crop = self.crop.take().ok_or(Error::StaleCache("multistream"))?;
        let g = self.fc2.backward(grad_out)?;
        let g = self.head_relu.backward(&g)?;
        let g = self.fc1.backward(&g)?;
        let g = self.combiner_dropout.backward(&g)?;
        let g = self.combiner_bn.backward(&g)?;
        let g = self.combiner_relu.backward(&g)?;
        let widths: Vec<usize> = self.streams.iter().map(|s| s.spec.embed_dim).collect();
        let blocks = split_channels(&g, &widths)?;
        let offsets: Vec<usize> = (0..self.streams.len()).map(|m| self.crop_offset(m, 1)).collect();
        let grads = par::map_mut(&mut self.streams, |m, s| {
            let gb = &blocks[m];
            let (b, len, d) = (gb.dim(0), gb.dim(1), gb.dim(2));
            let t = crop.t_stream[m];
            let mut padded = Tensor::zeros(&[b, t, d]);
            for u in 0..b {
                let dst = (u * t + offsets[m]) * d;
                padded.data_mut()[dst..dst + len * d].copy_from_slice(&gb.data()[u * len * d..(u + 1) * len * d]);
            }
            s.backward(&padded)
        });
        let mut gh: Option<Tensor<T>> = None;
        for g in grads {
            let g = g?;
            match &mut gh {
                None => gh = Some(g),
                Some(acc) => {
                    for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += v;
                    }
                }
            }
        }
        let gh = gh.expect("at least one stream");
        debug_assert_eq!(gh.dim(1), crop.t_stem);
        self.stem.backward(&gh)
    }

    fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        for (i, l) in self.stem.as_layers().into_iter().enumerate() {
            let prefix = self.stem.entry_name(i);
            l.visit_params(&mut |n, p| f(&join_name(&prefix, n), p));
        }
        for (m, s) in self.streams.iter().enumerate() {
            for (i, l) in s.layers.iter().enumerate() {
                l.visit_params(&mut |n, p| f(&format!("stream{m}.l{i}.{n}"), p));
            }
        }
        self.combiner_bn
            .visit_params(&mut |n, p| f(&join_name("combiner.bn", n), p));
        self.fc1.visit_params(&mut |n, p| f(&join_name("head.fc1", n), p));
        self.fc2.visit_params(&mut |n, p| f(&join_name("head.fc2", n), p));
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        let names: Vec<String> = (0..self.stem.as_layers().len())
            .map(|i| self.stem.entry_name(i))
            .collect();
        for (l, prefix) in self.stem.as_layers_mut().into_iter().zip(&names) {
            l.visit_params_mut(&mut |n, p| f(&join_name(prefix, n), p));
        }
        for (m, s) in self.streams.iter_mut().enumerate() {
            for (i, l) in s.layers.iter_mut().enumerate() {
                l.visit_params_mut(&mut |n, p| f(&format!("stream{m}.l{i}.{n}"), p));
            }
        }
        self.combiner_bn
            .visit_params_mut(&mut |n, p| f(&join_name("combiner.bn", n), p));
        self.fc1.visit_params_mut(&mut |n, p| f(&join_name("head.fc1", n), p));
        self.fc2.visit_params_mut(&mut |n, p| f(&join_name("head.fc2", n), p));
    }

    fn visit_buffers(&self, f: &mut BufferVisitor<'_, T>) {
        for (i, l) in self.stem.as_layers().into_iter().enumerate() {
            let prefix = self.stem.entry_name(i);
            l.visit_buffers(&mut |n, b| f(&join_name(&prefix, n), b));
        }
        for (m, s) in self.streams.iter().enumerate() {
            for (i, l) in s.layers.iter().enumerate() {
                l.visit_buffers(&mut |n, b| f(&format!("stream{m}.l{i}.{n}"), b));
            }
        }
        self.combiner_bn
            .visit_buffers(&mut |n, b| f(&join_name("combiner.bn", n), b));
    }

    fn visit_buffers_mut(&mut self, f: &mut BufferVisitorMut<'_, T>) {
        let names: Vec<String> = (0..self.stem.as_layers().len())
            .map(|i| self.stem.entry_name(i))
            .collect();
        for (l, prefix) in self.stem.as_layers_mut().into_iter().zip(&names) {
            l.visit_buffers_mut(&mut |n, b| f(&join_name(prefix, n), b));
        }
        for (m, s) in self.streams.iter_mut().enumerate() {
            for (i, l) in s.layers.iter_mut().enumerate() {
                l.visit_buffers_mut(&mut |n, b| f(&format!("stream{m}.l{i}.{n}"), b));
            }
        }
        self.combiner_bn
            .visit_buffers_mut(&mut |n, b| f(&join_name("combiner.bn", n), b));
    }
}
