//! Layers with explicit forward and backward passes.
//!
//! Sequence layers take `[batch, time, channels]`; elementwise layers, batch
//! norm and affine layers act on the trailing channel axis of any shape.
//! A training-mode `forward` caches what `backward` needs; `backward` consumes
//! that cache, so a second `backward` without a new forward is an error.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::init::{he_uniform, mix64};
use crate::kernels::{self, ConvSpec1D};
use crate::par;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, dropout masks keyed by the optimizer step.
    Training { step: u64 },
    /// Running statistics, no randomness.
    Inference,
}

impl Mode {
    pub fn is_training(self) -> bool {
        matches!(self, Mode::Training { .. })
    }
}

/// A trainable tensor and its same-shaped gradient slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(T::zero());
    }

    fn accumulate(&mut self, g: &[T]) {
        for (a, &b) in self.grad.data_mut().iter_mut().zip(g) {
            *a += b;
        }
    }
}

pub type ParamVisitor<'a, T> = dyn FnMut(&str, &Param<T>) + 'a;
pub type ParamVisitorMut<'a, T> = dyn FnMut(&str, &mut Param<T>) + 'a;
pub type BufferVisitor<'a, T> = dyn FnMut(&str, &Tensor<T>) + 'a;
pub type BufferVisitorMut<'a, T> = dyn FnMut(&str, &mut Tensor<T>) + 'a;

pub trait Layer<T: Real>: Send + Sync {
    fn kind(&self) -> &'static str;

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>>;

    /// Inference-mode forward that never touches layer state.
    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>>;

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>>;

    fn visit_params(&self, _f: &mut ParamVisitor<'_, T>) {}
    fn visit_params_mut(&mut self, _f: &mut ParamVisitorMut<'_, T>) {}
    /// Non-trainable state (batch-norm running statistics).
    fn visit_buffers(&self, _f: &mut BufferVisitor<'_, T>) {}
    fn visit_buffers_mut(&mut self, _f: &mut BufferVisitorMut<'_, T>) {}

    fn num_params(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }

    fn zero_grad(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }
}

/// `prefix.name` unless the prefix is empty.
pub fn join_name(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

fn expect_channels<T: Real>(op: &'static str, x: &Tensor<T>, channels: usize) -> Result<()> {
    if x.rank() == 0 || x.channels() != channels {
        return Err(Error::Shape {
            op,
            dim: "input channels",
            expected: channels,
            actual: if x.rank() == 0 { 0 } else { x.channels() },
        });
    }
    Ok(())
}

fn expect_same_shape<T: Real>(op: &'static str, want: &[usize], got: &Tensor<T>) -> Result<()> {
    if want != got.shape() {
        return Err(Error::Shape {
            op,
            dim: "gradient elements",
            expected: want.iter().product(),
            actual: got.len(),
        });
    }
    Ok(())
}

/// `y = x W + b` over the trailing axis.
#[derive(Clone, Debug)]
pub struct Affine<T> {
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Affine<T> {
    pub fn new(d_in: usize, d_out: usize, seed: u64, name: &str) -> Self {
        let weight = he_uniform(&[d_in, d_out], d_in, seed, &join_name(name, "weight"));
        Self::from_parts(weight, Tensor::zeros(&[d_out]))
    }

    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Self {
        Affine {
            weight: Param::new(weight),
            bias: Param::new(bias),
            cache: None,
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.value.dim(0)
    }

    pub fn d_out(&self) -> usize {
        self.weight.value.dim(1)
    }
}

impl<T: Real> Layer<T> for Affine<T> {
    fn kind(&self) -> &'static str {
        "affine"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(input)?;
        self.cache = mode.is_training().then(|| input.clone());
        Ok(y)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        expect_channels("affine", input, self.d_in())?;
        let (rows, d_out) = (input.rows(), self.d_out());
        let mut out = vec![T::zero(); rows * d_out];
        for r in out.chunks_mut(d_out) {
            r.copy_from_slice(self.bias.value.data());
        }
        kernels::gemm_nn(
            rows,
            self.d_in(),
            d_out,
            input.data(),
            self.weight.value.data(),
            &mut out,
            true,
        );
        let mut shape = input.shape().to_vec();
        *shape.last_mut().unwrap() = d_out;
        Tensor::from_vec(&shape, out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or(Error::StaleCache("affine"))?;
        let mut out_shape = x.shape().to_vec();
        *out_shape.last_mut().unwrap() = self.d_out();
        expect_same_shape("affine backward", &out_shape, grad_out)?;
        let (rows, d_in, d_out) = (x.rows(), self.d_in(), self.d_out());
        kernels::gemm_tn(
            d_in,
            rows,
            d_out,
            x.data(),
            grad_out.data(),
            self.weight.grad.data_mut(),
            true,
        );
        let mut gb = vec![T::zero(); d_out];
        for r in grad_out.data().chunks(d_out) {
            for (a, &g) in gb.iter_mut().zip(r) {
                *a += g;
            }
        }
        self.bias.accumulate(&gb);
        let mut gx = vec![T::zero(); rows * d_in];
        kernels::gemm_nt(
            rows,
            d_out,
            d_in,
            grad_out.data(),
            self.weight.value.data(),
            &mut gx,
            false,
        );
        Tensor::from_vec(x.shape(), gx)
    }

    fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}

#[derive(Clone, Debug, Default)]
pub struct Relu<T> {
    cache: Option<Tensor<T>>,
}

impl<T: Real> Relu<T> {
    pub fn new() -> Self {
        Relu { cache: None }
    }
}

impl<T: Real> Layer<T> for Relu<T> {
    fn kind(&self) -> &'static str {
        "relu"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.cache = mode.is_training().then(|| input.clone());
        Ok(kernels::relu(input))
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(kernels::relu(input))
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or(Error::StaleCache("relu"))?;
        expect_same_shape("relu backward", x.shape(), grad_out)?;
        Ok(kernels::relu_backward(&x, grad_out))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BatchNormConfig {
    pub momentum: f64,
    pub epsilon: f64,
}

impl Default for BatchNormConfig {
    fn default() -> Self {
        BatchNormConfig {
            momentum: 0.1,
            epsilon: 1e-5,
        }
    }
}

#[derive(Clone, Debug)]
struct BnCache<T> {
    xhat: Vec<T>,
    inv_std: Vec<T>,
    shape: Vec<usize>,
}

/// Per-channel batch normalization with statistics over every leading axis
/// (batch and time jointly).
#[derive(Clone, Debug)]
pub struct BatchNorm<T> {
    pub gamma: Param<T>,
    pub beta: Param<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub config: BatchNormConfig,
    cache: Option<BnCache<T>>,
}

impl<T: Real> BatchNorm<T> {
    pub fn new(dim: usize, config: BatchNormConfig) -> Self {
        BatchNorm {
            gamma: Param::new(Tensor::full(&[dim], T::one())),
            beta: Param::new(Tensor::zeros(&[dim])),
            running_mean: Tensor::zeros(&[dim]),
            running_var: Tensor::full(&[dim], T::one()),
            config,
            cache: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.gamma.value.len()
    }
}

impl<T: Real> Layer<T> for BatchNorm<T> {
    fn kind(&self) -> &'static str {
        "batchnorm"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        if !mode.is_training() {
            self.cache = None;
            return self.infer(input);
        }
        let d = self.dim();
        expect_channels("batchnorm", input, d)?;
        let rows = input.rows();
        if rows == 0 {
            return Err(Error::InsufficientContext {
                op: "batchnorm",
                required: 1,
                actual: 0,
            });
        }
        let n = T::of(rows as f64);
        let mut mean = vec![T::zero(); d];
        for r in input.data().chunks(d) {
            for (m, &v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / n);
        let mut var = vec![T::zero(); d];
        for r in input.data().chunks(d) {
            for ((s, &v), &m) in var.iter_mut().zip(r).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|v| *v = *v / n);
        let eps = T::of(self.config.epsilon);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(input.len());
        let mut out = Vec::with_capacity(input.len());
        let (g, b) = (self.gamma.value.data(), self.beta.value.data());
        for r in input.data().chunks(d) {
            for c in 0..d {
                let h = (r[c] - mean[c]) * inv_std[c];
                xhat.push(h);
                out.push(g[c] * h + b[c]);
            }
        }
        let m = T::of(self.config.momentum);
        let unbias = if rows > 1 { n / (n - T::one()) } else { T::one() };
        for c in 0..d {
            let rm = &mut self.running_mean.data_mut()[c];
            *rm = (T::one() - m) * *rm + m * mean[c];
            let rv = &mut self.running_var.data_mut()[c];
            *rv = (T::one() - m) * *rv + m * var[c] * unbias;
        }
        self.cache = Some(BnCache {
            xhat,
            inv_std,
            shape: input.shape().to_vec(),
        });
        Tensor::from_vec(input.shape(), out)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let d = self.dim();
        expect_channels("batchnorm", input, d)?;
        let eps = T::of(self.config.epsilon);
        let scale: Vec<T> = (0..d)
            .map(|c| self.gamma.value.data()[c] / (self.running_var.data()[c] + eps).sqrt())
            .collect();
        let shift: Vec<T> = (0..d)
            .map(|c| self.beta.value.data()[c] - self.running_mean.data()[c] * scale[c])
            .collect();
        let mut out = Vec::with_capacity(input.len());
        for r in input.data().chunks(d) {
            for c in 0..d {
                out.push(r[c] * scale[c] + shift[c]);
            }
        }
        Tensor::from_vec(input.shape(), out)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::StaleCache("batchnorm"))?;
        expect_same_shape("batchnorm backward", &cache.shape, grad_out)?;
        let d = self.dim();
        let rows = grad_out.rows();
        let n = T::of(rows as f64);
        let mut sum_g = vec![T::zero(); d];
        let mut sum_gx = vec![T::zero(); d];
        for (gr, hr) in grad_out.data().chunks(d).zip(cache.xhat.chunks(d)) {
            for c in 0..d {
                sum_g[c] += gr[c];
                sum_gx[c] += gr[c] * hr[c];
            }
        }
        self.gamma.accumulate(&sum_gx);
        self.beta.accumulate(&sum_g);
        let gamma = self.gamma.value.data();
        let mut gx = Vec::with_capacity(grad_out.len());
        for (gr, hr) in grad_out.data().chunks(d).zip(cache.xhat.chunks(d)) {
            for c in 0..d {
                let k = gamma[c] * cache.inv_std[c] / n;
                gx.push(k * (n * gr[c] - sum_g[c] - hr[c] * sum_gx[c]));
            }
        }
        Tensor::from_vec(&cache.shape, gx)
    }

    fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        f("gamma", &self.gamma);
        f("beta", &self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        f("gamma", &mut self.gamma);
        f("beta", &mut self.beta);
    }

    fn visit_buffers(&self, f: &mut BufferVisitor<'_, T>) {
        f("running_mean", &self.running_mean);
        f("running_var", &self.running_var);
    }

    fn visit_buffers_mut(&mut self, f: &mut BufferVisitorMut<'_, T>) {
        f("running_mean", &mut self.running_mean);
        f("running_var", &mut self.running_var);
    }
}

/// Inverted dropout. In training mode each activation is zeroed with
/// probability `p` and survivors are scaled by `1 / (1 - p)`. The mask is a
/// pure function of the layer seed and the training step.
#[derive(Clone, Debug)]
pub struct Dropout<T> {
    pub p: f64,
    pub seed: u64,
    cache: Option<Vec<T>>,
}

impl<T: Real> Dropout<T> {
    pub fn new(p: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::config(format!("dropout probability must be in [0, 1), got {p}")));
        }
        Ok(Dropout { p, seed, cache: None })
    }

    fn mask(&self, len: usize, step: u64) -> Vec<T> {
        if self.p == 0.0 {
            return vec![T::one(); len];
        }
        let keep = T::of(1.0 / (1.0 - self.p));
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(self.seed ^ mix64(step)));
        (0..len)
            .map(|_| if rng.gen::<f64>() < self.p { T::zero() } else { keep })
            .collect()
    }
}

impl<T: Real> Layer<T> for Dropout<T> {
    fn kind(&self) -> &'static str {
        "dropout"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let Mode::Training { step } = mode else {
            self.cache = None;
            return self.infer(input);
        };
        let mask = self.mask(input.len(), step);
        let data = input.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        self.cache = Some(mask);
        Tensor::from_vec(input.shape(), data)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(input.clone())
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mask = self.cache.take().ok_or(Error::StaleCache("dropout"))?;
        if mask.len() != grad_out.len() {
            return Err(Error::Shape {
                op: "dropout backward",
                dim: "gradient elements",
                expected: mask.len(),
                actual: grad_out.len(),
            });
        }
        let data = grad_out.data().iter().zip(&mask).map(|(&g, &m)| g * m).collect();
        Tensor::from_vec(grad_out.shape(), data)
    }
}

fn expect_sequence<T: Real>(op: &'static str, x: &Tensor<T>, channels: usize) -> Result<()> {
    if x.rank() != 3 {
        return Err(Error::Shape {
            op,
            dim: "input rank ([batch, time, channels])",
            expected: 3,
            actual: x.rank(),
        });
    }
    expect_channels(op, x, channels)
}

/// Bias-free or biased dilated 1-D convolution over `[B, T, Cin]`.
#[derive(Clone, Debug)]
pub struct Conv1d<T> {
    pub spec: ConvSpec1D,
    pub weight: Param<T>,
    pub bias: Option<Param<T>>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Conv1d<T> {
    pub fn new(spec: ConvSpec1D, with_bias: bool, seed: u64, name: &str) -> Self {
        let shape = [spec.taps().len(), spec.in_channels, spec.out_channels];
        let fan_in = spec.taps().len() * spec.in_channels;
        let weight = he_uniform(&shape, fan_in, seed, &join_name(name, "weight"));
        let bias = with_bias.then(|| Param::new(Tensor::zeros(&[spec.out_channels])));
        Conv1d {
            spec,
            weight: Param::new(weight),
            bias,
            cache: None,
        }
    }
}

impl<T: Real> Layer<T> for Conv1d<T> {
    fn kind(&self) -> &'static str {
        "conv1d"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(input)?;
        self.cache = mode.is_training().then(|| input.clone());
        Ok(y)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        expect_sequence("conv1d", input, self.spec.in_channels)?;
        let (b, t) = (input.dim(0), input.dim(1));
        let t_out = self.spec.output_len(t)?;
        let cout = self.spec.out_channels;
        let utts = input.unstack();
        let outs = par::map(&utts, |_, x| {
            let mut out = vec![T::zero(); t_out * cout];
            if let Some(bias) = &self.bias {
                for r in out.chunks_mut(cout) {
                    r.copy_from_slice(bias.value.data());
                }
            }
            kernels::conv1d_raw(
                &self.spec,
                x.data(),
                t,
                self.weight.value.data(),
                &mut out,
                self.bias.is_some(),
            );
            out
        });
        Tensor::from_vec(&[b, t_out, cout], outs.concat())
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or(Error::StaleCache("conv1d"))?;
        let (b, t) = (x.dim(0), x.dim(1));
        let t_out = t - self.spec.span();
        let (cin, cout) = (self.spec.in_channels, self.spec.out_channels);
        expect_same_shape("conv1d backward", &[b, t_out, cout], grad_out)?;
        let mut gx = vec![T::zero(); x.len()];
        for i in 0..b {
            let xs = &x.data()[i * t * cin..(i + 1) * t * cin];
            let gs = &grad_out.data()[i * t_out * cout..(i + 1) * t_out * cout];
            kernels::conv1d_raw_backward(
                &self.spec,
                xs,
                t,
                self.weight.value.data(),
                gs,
                Some(&mut gx[i * t * cin..(i + 1) * t * cin]),
                self.weight.grad.data_mut(),
            );
        }
        if let Some(bias) = &mut self.bias {
            let gb = bias.grad.data_mut();
            for r in grad_out.data().chunks(cout) {
                for (a, &g) in gb.iter_mut().zip(r) {
                    *a += g;
                }
            }
        }
        Tensor::from_vec(x.shape(), gx)
    }

    fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        f("weight", &self.weight);
        if let Some(b) = &self.bias {
            f("bias", b);
        }
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        f("weight", &mut self.weight);
        if let Some(b) = &mut self.bias {
            f("bias", b);
        }
    }
}

/// 3×3 same-padded convolution over `[B, T, F, Cin]` with frequency stride.
#[derive(Clone, Debug)]
pub struct Conv2d<T> {
    pub freq_stride: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
    cache: Option<Tensor<T>>,
}

impl<T: Real> Conv2d<T> {
    pub fn new(in_channels: usize, out_channels: usize, freq_stride: usize, seed: u64, name: &str) -> Result<Self> {
        if !(1..=2).contains(&freq_stride) {
            return Err(Error::config(format!(
                "conv2d frequency stride must be 1 or 2, got {freq_stride}"
            )));
        }
        let weight = he_uniform(
            &[3, 3, in_channels, out_channels],
            9 * in_channels,
            seed,
            &join_name(name, "weight"),
        );
        Ok(Conv2d {
            freq_stride,
            weight: Param::new(weight),
            bias: Param::new(Tensor::zeros(&[out_channels])),
            cache: None,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.dim(2)
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.dim(3)
    }
}

impl<T: Real> Layer<T> for Conv2d<T> {
    fn kind(&self) -> &'static str {
        "conv2d"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let y = self.infer(input)?;
        self.cache = mode.is_training().then(|| input.clone());
        Ok(y)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        if input.rank() != 4 {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "input rank ([batch, time, freq, channels])",
                expected: 4,
                actual: input.rank(),
            });
        }
        let utts = input.unstack();
        let outs = par::map(&utts, |_, x| {
            let mut y = kernels::conv2d_impl(x, &self.weight.value, self.freq_stride, 1)?;
            let c = y.channels();
            for r in y.data_mut().chunks_mut(c) {
                for (v, &b) in r.iter_mut().zip(self.bias.value.data()) {
                    *v += b;
                }
            }
            Ok(y)
        });
        let outs: Result<Vec<_>> = outs.into_iter().collect();
        Tensor::stack(&outs?)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let x = self.cache.take().ok_or(Error::StaleCache("conv2d"))?;
        let mut gx = Vec::with_capacity(x.len());
        for (xi, gi) in x.unstack().iter().zip(grad_out.unstack()) {
            let (g_in, g_w) = kernels::conv2d_backward_impl(xi, &self.weight.value, self.freq_stride, &gi, 1)?;
            self.weight.accumulate(g_w.data());
            let c = gi.channels();
            let gb = self.bias.grad.data_mut();
            for r in gi.data().chunks(c) {
                for (a, &g) in gb.iter_mut().zip(r) {
                    *a += g;
                }
            }
            gx.extend_from_slice(g_in.data());
        }
        Tensor::from_vec(x.shape(), gx)
    }

    fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        f("weight", &self.weight);
        f("bias", &self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        f("weight", &mut self.weight);
        f("bias", &mut self.bias);
    }
}
