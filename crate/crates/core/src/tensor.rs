//! Dense row-major tensors, channels-last.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

use crate::error::{Error, Result};

/// Scalar type usable in tensors: `f32` for training and inference, `f64`
/// for gradient verification.
pub trait Real: Float + Debug + Default + Send + Sync + Sum + AddAssign + SubAssign + MulAssign + 'static {
    fn of(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn of(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape {
                op: "Tensor::from_vec",
                dim: "element count",
                expected,
                actual: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn from_fn(shape: &[usize], f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(f).collect(),
        }
    }

    /// Row-major 2-D tensor from nested rows. Panics on ragged input.
    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Tensor {
            shape: vec![rows.len(), cols],
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = T::one();
        }
        t
    }

    #[inline]
    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    #[inline]
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    /// Size of the trailing (channel) axis.
    #[inline]
    pub fn channels(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    /// Number of channel vectors, i.e. the product of all leading axes.
    #[inline]
    pub fn rows(&self) -> usize {
        let c = self.channels();
        if c == 0 {
            0
        } else {
            self.data.len() / c
        }
    }

    #[inline]
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.channels();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::from_vec(shape, self.data)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn fill(&mut self, value: T) {
        self.data.iter_mut().for_each(|v| *v = value);
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on different shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.as_f64() - b.as_f64()).abs())
            .fold(0.0, f64::max)
    }

    /// Squared Frobenius norm accumulated in `f64`.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v.as_f64() * v.as_f64()).sum()
    }

    /// Split off the leading axis of a rank ≥ 2 tensor: `[B, ...] -> B × [...]`.
    pub fn unstack(&self) -> Vec<Tensor<T>> {
        let b = self.shape[0];
        let inner: Vec<usize> = self.shape[1..].to_vec();
        let n: usize = inner.iter().product();
        (0..b)
            .map(|i| Tensor {
                shape: inner.clone(),
                data: self.data[i * n..(i + 1) * n].to_vec(),
            })
            .collect()
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Self> {
        let first = items.first().ok_or_else(|| Error::config("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for item in items {
            if item.shape != first.shape {
                return Err(Error::Shape {
                    op: "Tensor::stack",
                    dim: "element count",
                    expected: first.len(),
                    actual: item.len(),
                });
            }
            data.extend_from_slice(&item.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Keep frames `start..start + len` along axis 1 of a `[B, T, ...]` tensor.
    pub fn slice_time(&self, start: usize, len: usize) -> Self {
        let b = self.shape[0];
        let t = self.shape[1];
        assert!(start + len <= t, "time slice out of range");
        let frame: usize = self.shape[2..].iter().product();
        let mut data = Vec::with_capacity(b * len * frame);
        for bi in 0..b {
            let base = (bi * t + start) * frame;
            data.extend_from_slice(&self.data[base..base + len * frame]);
        }
        let mut shape = self.shape.clone();
        shape[1] = len;
        Tensor { shape, data }
    }

    /// Every `stride`-th frame along axis 1 of a `[B, T, ...]` tensor, starting at 0.
    pub fn stride_time(&self, stride: usize) -> Self {
        let b = self.shape[0];
        let t = self.shape[1];
        let frame: usize = self.shape[2..].iter().product();
        let kept = t.div_ceil(stride);
        let mut data = Vec::with_capacity(b * kept * frame);
        for bi in 0..b {
            for ti in (0..t).step_by(stride) {
                let base = (bi * t + ti) * frame;
                data.extend_from_slice(&self.data[base..base + frame]);
            }
        }
        let mut shape = self.shape.clone();
        shape[1] = kept;
        Tensor { shape, data }
    }
}
