//! Factorized time-delay layer.
//!
//! A three-tap dilated convolution `[-r, 0, r]` factored through a bottleneck:
//! splice `{-r, 0}` → `factor_a` (no bias, kept semi-orthogonal) → splice
//! `{0, +r}` → `factor_b` + bias → ReLU → scaled identity skip from the
//! time-aligned input → batch norm → dropout. Each layer trims `2r` frames.

use crate::error::{Error, Result};
use crate::init::{derive_seed, he_uniform};
use crate::kernels::{self, ConvSpec1D};
use crate::layers::{
    join_name, BatchNorm, BatchNormConfig, BufferVisitor, BufferVisitorMut, Dropout, Layer, Mode, Param, ParamVisitor,
    ParamVisitorMut,
};
use crate::par;
use crate::tensor::{Real, Tensor};

/// Step size of the semi-orthogonality update.
pub const ORTHO_ALPHA: f64 = 0.125;

#[derive(Clone, Debug, PartialEq)]
pub struct TdnnfConfig {
    pub d_in: usize,
    pub d_out: usize,
    pub bottleneck: usize,
    pub dilation: usize,
    pub dropout_p: f64,
    pub skip: bool,
    pub skip_scale: f64,
    pub bn: BatchNormConfig,
}

impl TdnnfConfig {
    /// Square layer with an identity skip and the default skip scale.
    pub fn square(dim: usize, bottleneck: usize, dilation: usize, dropout_p: f64) -> Self {
        TdnnfConfig {
            d_in: dim,
            d_out: dim,
            bottleneck,
            dilation,
            dropout_p,
            skip: true,
            skip_scale: 0.66,
            bn: BatchNormConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_out == 0 || self.bottleneck == 0 {
            return Err(Error::config("TDNN-F dimensions must be positive"));
        }
        if self.dilation == 0 {
            return Err(Error::config("TDNN-F dilation must be positive"));
        }
        if self.bottleneck >= self.d_in {
            return Err(Error::config(format!(
                "TDNN-F bottleneck {} must be smaller than its input dim {}",
                self.bottleneck, self.d_in
            )));
        }
        if self.skip && self.d_in != self.d_out {
            return Err(Error::config(format!(
                "TDNN-F identity skip needs d_in == d_out, got {} -> {}",
                self.d_in, self.d_out
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!(
                "dropout probability must be in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    /// Scalars in the trainable tensors: both factors, the bias and the batch-norm affine pair.
    pub fn param_count(&self) -> usize {
        2 * self.d_in * self.bottleneck + 2 * self.bottleneck * self.d_out + self.d_out + 2 * self.d_out
    }

    /// Frames consumed: `T' = T - context()`.
    pub fn context(&self) -> usize {
        2 * self.dilation
    }
}

#[derive(Clone, Debug)]
struct Cache<T> {
    x: Tensor<T>,
    h1: Vec<T>,
    pre: Vec<T>,
}

#[derive(Clone, Debug)]
pub struct TdnnfLayer<T> {
    pub config: TdnnfConfig,
    /// `[2·d_in, b]`; rows are the `{-r, 0}` spliced input.
    pub factor_a: Param<T>,
    /// `[2·b, d_out]`; rows are the `{0, +r}` spliced bottleneck.
    pub factor_b: Param<T>,
    pub bias: Param<T>,
    pub bn: BatchNorm<T>,
    pub dropout: Dropout<T>,
    cache: Option<Cache<T>>,
}

impl<T: Real> TdnnfLayer<T> {
    pub fn new(config: TdnnfConfig, seed: u64, name: &str) -> Result<Self> {
        config.validate()?;
        let (d_in, b, d_out) = (config.d_in, config.bottleneck, config.d_out);
        let factor_a = he_uniform(&[2 * d_in, b], 2 * d_in, seed, &join_name(name, "factor_a"));
        let factor_b = he_uniform(&[2 * b, d_out], 2 * b, seed, &join_name(name, "factor_b"));
        let dropout = Dropout::new(config.dropout_p, derive_seed(seed, &join_name(name, "dropout")))?;
        Ok(TdnnfLayer {
            bn: BatchNorm::new(d_out, config.bn),
            factor_a: Param::new(factor_a),
            factor_b: Param::new(factor_b),
            bias: Param::new(Tensor::zeros(&[d_out])),
            dropout,
            config,
            cache: None,
        })
    }

    fn specs(&self, dilation: usize) -> (ConvSpec1D, ConvSpec1D) {
        let r = dilation as isize;
        let c = &self.config;
        (
            ConvSpec1D::new(c.d_in, c.bottleneck, vec![0, r]).expect("valid spec"),
            ConvSpec1D::new(c.bottleneck, c.d_out, vec![0, r]).expect("valid spec"),
        )
    }

    fn check_input(&self, x: &Tensor<T>, dilation: usize) -> Result<()> {
        if x.rank() != 3 || x.channels() != self.config.d_in {
            return Err(Error::Shape {
                op: "tdnnf",
                dim: "input channels ([batch, time, d_in])",
                expected: self.config.d_in,
                actual: if x.rank() == 0 { 0 } else { x.channels() },
            });
        }
        if x.dim(1) < 2 * dilation + 1 {
            return Err(Error::InsufficientContext {
                op: "tdnnf",
                required: 2 * dilation + 1,
                actual: x.dim(1),
            });
        }
        Ok(())
    }

    /// Factored path plus skip, before batch norm. Returns `(h1, pre_relu, summed)`.
    fn factored(&self, x: &Tensor<T>, dilation: usize) -> (Vec<T>, Vec<T>, Tensor<T>) {
        let (b, t) = (x.dim(0), x.dim(1));
        let c = &self.config;
        let (spec_a, spec_b) = self.specs(dilation);
        let (t1, t_out) = (t - dilation, t - 2 * dilation);
        let skip_scale = T::of(c.skip_scale);
        let utts = x.unstack();
        let per_utt = par::map(&utts, |_, xu| {
            let mut h1 = vec![T::zero(); t1 * c.bottleneck];
            kernels::conv1d_raw(&spec_a, xu.data(), t, self.factor_a.value.data(), &mut h1, false);
            let mut pre = vec![T::zero(); t_out * c.d_out];
            for row in pre.chunks_mut(c.d_out) {
                row.copy_from_slice(self.bias.value.data());
            }
            kernels::conv1d_raw(&spec_b, &h1, t1, self.factor_b.value.data(), &mut pre, true);
            let mut sum: Vec<T> = pre.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
            if c.skip {
                let centered = &xu.data()[dilation * c.d_in..(dilation + t_out) * c.d_in];
                for (s, &v) in sum.iter_mut().zip(centered) {
                    *s += skip_scale * v;
                }
            }
            (h1, pre, sum)
        });
        let mut h1s = Vec::with_capacity(b * t1 * c.bottleneck);
        let mut pres = Vec::with_capacity(b * t_out * c.d_out);
        let mut sums = Vec::with_capacity(b * t_out * c.d_out);
        for (h1, pre, sum) in per_utt {
            h1s.extend(h1);
            pres.extend(pre);
            sums.extend(sum);
        }
        let summed = Tensor::from_vec(&[b, t_out, c.d_out], sums).expect("tdnnf output shape");
        (h1s, pres, summed)
    }

    /// Inference at an explicit dilation; used to evaluate a layer on a
    /// decimated frame grid where the effective dilation is `r / S`.
    pub fn infer_with_dilation(&self, x: &Tensor<T>, dilation: usize) -> Result<Tensor<T>> {
        self.check_input(x, dilation)?;
        let (_, _, summed) = self.factored(x, dilation);
        self.bn.infer(&summed)
    }

    /// `‖M Mᵀ - I‖_F` with `M = factor_aᵀ` (rows are the bottleneck dim).
    pub fn ortho_defect(&self) -> f64 {
        orthonormality_defect(&self.bottleneck_matrix())
    }

    /// One constraint update `M ← M - α (M Mᵀ - I) M` on `M = factor_aᵀ`.
    pub fn semi_orthogonal_step(&mut self) {
        let mut m = self.bottleneck_matrix();
        semi_orthogonal_update(&mut m, ORTHO_ALPHA);
        let (rows, cols) = (m.dim(0), m.dim(1));
        let a = kernels::transpose(m.data(), rows, cols);
        self.factor_a.value.data_mut().copy_from_slice(&a);
    }

    fn bottleneck_matrix(&self) -> Tensor<T> {
        let (n, b) = (2 * self.config.d_in, self.config.bottleneck);
        Tensor::from_vec(&[b, n], kernels::transpose(self.factor_a.value.data(), n, b)).expect("factor shape")
    }
}

/// `‖M Mᵀ - I‖_F` for a `rows × cols` matrix, accumulated in `f64`.
pub fn orthonormality_defect<T: Real>(m: &Tensor<T>) -> f64 {
    let (rows, cols) = (m.dim(0), m.dim(1));
    let mut p = vec![T::zero(); rows * rows];
    kernels::gemm_nt(rows, cols, rows, m.data(), m.data(), &mut p, false);
    let mut acc = 0.0;
    for i in 0..rows {
        for j in 0..rows {
            let v = p[i * rows + j].as_f64() - if i == j { 1.0 } else { 0.0 };
            acc += v * v;
        }
    }
    acc.sqrt()
}

/// In-place `M ← M - α (M Mᵀ - I) M`.
pub fn semi_orthogonal_update<T: Real>(m: &mut Tensor<T>, alpha: f64) {
    let (rows, cols) = (m.dim(0), m.dim(1));
    let mut p = vec![T::zero(); rows * rows];
    kernels::gemm_nt(rows, cols, rows, m.data(), m.data(), &mut p, false);
    for i in 0..rows {
        p[i * rows + i] -= T::one();
    }
    let mut delta = vec![T::zero(); rows * cols];
    kernels::gemm_nn(rows, rows, cols, &p, m.data(), &mut delta, false);
    let a = T::of(alpha);
    for (v, &d) in m.data_mut().iter_mut().zip(&delta) {
        *v -= a * d;
    }
}

impl<T: Real> Layer<T> for TdnnfLayer<T> {
    fn kind(&self) -> &'static str {
        "tdnnf"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let r = self.config.dilation;
        self.check_input(input, r)?;
        let (h1, pre, summed) = self.factored(input, r);
        let normed = self.bn.forward(&summed, mode)?;
        let out = self.dropout.forward(&normed, mode)?;
        self.cache = mode.is_training().then(|| Cache {
            x: input.clone(),
            h1,
            pre,
        });
        Ok(out)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        self.infer_with_dilation(input, self.config.dilation)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let cache = self.cache.take().ok_or(Error::StaleCache("tdnnf"))?;
        let g = self.dropout.backward(grad_out)?;
        let g = self.bn.backward(&g)?;
        let c = self.config.clone();
        let r = c.dilation;
        let (b, t) = (cache.x.dim(0), cache.x.dim(1));
        let (t1, t_out) = (t - r, t - 2 * r);
        let (spec_a, spec_b) = self.specs(r);
        let mut gx = vec![T::zero(); cache.x.len()];
        let skip_scale = T::of(c.skip_scale);
        let grad_pre: Vec<T> = g
            .data()
            .iter()
            .zip(&cache.pre)
            .map(|(&gv, &p)| if p > T::zero() { gv } else { T::zero() })
            .collect();
        {
            let gb = self.bias.grad.data_mut();
            for row in grad_pre.chunks(c.d_out) {
                for (a, &v) in gb.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        for u in 0..b {
            let xu = &cache.x.data()[u * t * c.d_in..(u + 1) * t * c.d_in];
            let h1u = &cache.h1[u * t1 * c.bottleneck..(u + 1) * t1 * c.bottleneck];
            let gpu = &grad_pre[u * t_out * c.d_out..(u + 1) * t_out * c.d_out];
            let mut gh1 = vec![T::zero(); t1 * c.bottleneck];
            kernels::conv1d_raw_backward(
                &spec_b,
                h1u,
                t1,
                self.factor_b.value.data(),
                gpu,
                Some(&mut gh1),
                self.factor_b.grad.data_mut(),
            );
            let gxu = &mut gx[u * t * c.d_in..(u + 1) * t * c.d_in];
            kernels::conv1d_raw_backward(
                &spec_a,
                xu,
                t,
                self.factor_a.value.data(),
                &gh1,
                Some(gxu),
                self.factor_a.grad.data_mut(),
            );
            if c.skip {
                let gs = &g.data()[u * t_out * c.d_out..(u + 1) * t_out * c.d_out];
                for (dst, &v) in gxu[r * c.d_in..(r + t_out) * c.d_in].iter_mut().zip(gs) {
                    *dst += skip_scale * v;
                }
            }
        }
        Tensor::from_vec(cache.x.shape(), gx)
    }

    fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        f("factor_a", &self.factor_a);
        f("factor_b", &self.factor_b);
        f("bias", &self.bias);
        self.bn.visit_params(&mut |n, p| f(&join_name("bn", n), p));
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        f("factor_a", &mut self.factor_a);
        f("factor_b", &mut self.factor_b);
        f("bias", &mut self.bias);
        self.bn.visit_params_mut(&mut |n, p| f(&join_name("bn", n), p));
    }

    fn visit_buffers(&self, f: &mut BufferVisitor<'_, T>) {
        self.bn.visit_buffers(&mut |n, b| f(&join_name("bn", n), b));
    }

    fn visit_buffers_mut(&mut self, f: &mut BufferVisitorMut<'_, T>) {
        self.bn.visit_buffers_mut(&mut |n, b| f(&join_name("bn", n), b));
    }
}
