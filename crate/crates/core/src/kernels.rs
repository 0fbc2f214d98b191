//! Numeric kernels: matrix products, dilated 1-D convolution, 3×3 2-D
//! convolution and the elementwise ops the layers are assembled from.
//!
//! All kernels are pure. Each output element is accumulated in a fixed order
//! that depends only on the reduction index, never on how many rows are
//! computed or how work is split across threads.

use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{Real, Tensor};

const ROW_BLOCK: usize = 16;
const K_BLOCK: usize = 256;

/// `C (+)= A · B` where `A(i, p) = a[i * rs + p * cs]`.
fn gemm_strided<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rs: usize,
    cs: usize,
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(b.len(), k * n);
    if !accumulate {
        c.fill(T::zero());
    }
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    par::for_each_chunk_mut(c, ROW_BLOCK * n, m * n * k, |block, rows| {
        let row0 = block * ROW_BLOCK;
        let nrows = rows.len() / n;
        for kb in (0..k).step_by(K_BLOCK) {
            let ke = (kb + K_BLOCK).min(k);
            let mut i = 0;
            while i + 4 <= nrows {
                let (c0, rest) = rows[i * n..(i + 4) * n].split_at_mut(n);
                let (c1, rest) = rest.split_at_mut(n);
                let (c2, c3) = rest.split_at_mut(n);
                let r = row0 + i;
                for p in kb..ke {
                    let brow = &b[p * n..(p + 1) * n];
                    let a0 = a[r * rs + p * cs];
                    let a1 = a[(r + 1) * rs + p * cs];
                    let a2 = a[(r + 2) * rs + p * cs];
                    let a3 = a[(r + 3) * rs + p * cs];
                    for ((((x0, x1), x2), x3), &bv) in c0
                        .iter_mut()
                        .zip(c1.iter_mut())
                        .zip(c2.iter_mut())
                        .zip(c3.iter_mut())
                        .zip(brow)
                    {
                        *x0 += a0 * bv;
                        *x1 += a1 * bv;
                        *x2 += a2 * bv;
                        *x3 += a3 * bv;
                    }
                }
                i += 4;
            }
            while i < nrows {
                let crow = &mut rows[i * n..(i + 1) * n];
                let r = row0 + i;
                for p in kb..ke {
                    let brow = &b[p * n..(p + 1) * n];
                    let av = a[r * rs + p * cs];
                    for (x, &bv) in crow.iter_mut().zip(brow) {
                        *x += av * bv;
                    }
                }
                i += 1;
            }
        }
    });
}

/// `C[m×n] (+)= A[m×k] · B[k×n]`.
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    gemm_strided(m, k, n, a, k, 1, b, c, accumulate);
}

/// `C[m×n] (+)= Aᵀ · B` with `A` stored as `k×m`.
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    debug_assert_eq!(a.len(), m * k);
    gemm_strided(m, k, n, a, 1, m, b, c, accumulate);
}

/// `C[m×n] (+)= A · Bᵀ` with `B` stored as `n×k`.
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    debug_assert_eq!(b.len(), n * k);
    let bt = transpose(b, n, k);
    gemm_nn(m, k, n, a, &bt, c, accumulate);
}

/// Transpose a row-major `rows×cols` matrix.
pub fn transpose<T: Real>(x: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = x[i * cols + j];
        }
    }
    out
}

pub fn matmul<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.rank() != 2 || b.rank() != 2 {
        return Err(Error::Shape {
            op: "matmul",
            dim: "rank",
            expected: 2,
            actual: if a.rank() != 2 { a.rank() } else { b.rank() },
        });
    }
    let (m, k) = (a.dim(0), a.dim(1));
    let (k2, n) = (b.dim(0), b.dim(1));
    if k != k2 {
        return Err(Error::Shape {
            op: "matmul",
            dim: "inner dimension of rhs",
            expected: k,
            actual: k2,
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    gemm_nn(m, k, n, a.data(), b.data(), out.data_mut(), false);
    Ok(out)
}

/// A 1-D convolution over time whose dilation is carried by explicit tap offsets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvSpec1D {
    pub in_channels: usize,
    pub out_channels: usize,
    taps: Vec<isize>,
}

impl ConvSpec1D {
    pub fn new(in_channels: usize, out_channels: usize, taps: Vec<isize>) -> Result<Self> {
        if in_channels == 0 || out_channels == 0 {
            return Err(Error::config("conv1d channel counts must be positive"));
        }
        if taps.is_empty() {
            return Err(Error::config("conv1d needs at least one tap"));
        }
        if taps.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config(format!(
                "conv1d taps must be strictly increasing, got {taps:?}"
            )));
        }
        Ok(ConvSpec1D {
            in_channels,
            out_channels,
            taps,
        })
    }

    /// Symmetric three-tap kernel `[-r, 0, r]`.
    pub fn dilated3(in_channels: usize, out_channels: usize, dilation: usize) -> Result<Self> {
        let r = dilation as isize;
        Self::new(in_channels, out_channels, vec![-r, 0, r])
    }

    pub fn taps(&self) -> &[isize] {
        &self.taps
    }

    pub fn span(&self) -> usize {
        (self.taps[self.taps.len() - 1] - self.taps[0]) as usize
    }

    /// Input rows read by each tap relative to the first valid output frame.
    fn offsets(&self) -> impl Iterator<Item = usize> + '_ {
        let min = self.taps[0];
        self.taps.iter().map(move |&t| (t - min) as usize)
    }

    pub fn output_len(&self, input_len: usize) -> Result<usize> {
        let span = self.span();
        if input_len < span + 1 {
            return Err(Error::InsufficientContext {
                op: "conv1d",
                required: span + 1,
                actual: input_len,
            });
        }
        Ok(input_len - span)
    }

    pub fn weight_len(&self) -> usize {
        self.taps.len() * self.in_channels * self.out_channels
    }
}

/// Valid convolution on raw slices: `out[t'] (+)= Σ_tap x[t' + off_tap] · W_tap`.
pub(crate) fn conv1d_raw<T: Real>(spec: &ConvSpec1D, x: &[T], t_in: usize, w: &[T], out: &mut [T], accumulate: bool) {
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let t_out = t_in - spec.span();
    for (i, off) in spec.offsets().enumerate() {
        let xs = &x[off * cin..(off + t_out) * cin];
        let wt = &w[i * cin * cout..(i + 1) * cin * cout];
        gemm_nn(t_out, cin, cout, xs, wt, out, accumulate || i > 0);
    }
}

/// Backward of [`conv1d_raw`]: accumulates into `grad_x` and `grad_w`.
pub(crate) fn conv1d_raw_backward<T: Real>(
    spec: &ConvSpec1D,
    x: &[T],
    t_in: usize,
    w: &[T],
    grad_out: &[T],
    grad_x: Option<&mut [T]>,
    grad_w: &mut [T],
) {
    let (cin, cout) = (spec.in_channels, spec.out_channels);
    let t_out = t_in - spec.span();
    for (i, off) in spec.offsets().enumerate() {
        let xs = &x[off * cin..(off + t_out) * cin];
        let gw = &mut grad_w[i * cin * cout..(i + 1) * cin * cout];
        gemm_tn(cin, t_out, cout, xs, grad_out, gw, true);
    }
    if let Some(grad_x) = grad_x {
        for (i, off) in spec.offsets().enumerate() {
            let wt = &w[i * cin * cout..(i + 1) * cin * cout];
            let gx = &mut grad_x[off * cin..(off + t_out) * cin];
            gemm_nt(t_out, cout, cin, grad_out, wt, gx, true);
        }
    }
}

fn check_conv1d<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, spec: &ConvSpec1D) -> Result<usize> {
    if input.rank() != 2 {
        return Err(Error::Shape {
            op: "conv1d",
            dim: "input rank",
            expected: 2,
            actual: input.rank(),
        });
    }
    if input.dim(1) != spec.in_channels {
        return Err(Error::Shape {
            op: "conv1d",
            dim: "input channels",
            expected: spec.in_channels,
            actual: input.dim(1),
        });
    }
    let expected = [spec.taps.len(), spec.in_channels, spec.out_channels];
    if weights.rank() != 3 {
        return Err(Error::Shape {
            op: "conv1d",
            dim: "weight rank",
            expected: 3,
            actual: weights.rank(),
        });
    }
    for (axis, (&e, name)) in expected
        .iter()
        .zip(["weight taps", "weight input channels", "weight output channels"])
        .enumerate()
    {
        if weights.dim(axis) != e {
            return Err(Error::Shape {
                op: "conv1d",
                dim: name,
                expected: e,
                actual: weights.dim(axis),
            });
        }
    }
    spec.output_len(input.dim(0))
}

/// Valid ("context-trimming") dilated convolution of a `[T, Cin]` sequence with
/// weights `[taps, Cin, Cout]`, producing `[T - span, Cout]`. Output frame `t'`
/// reads input frames `t' - min(taps) + tap`.
pub fn conv1d<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, spec: &ConvSpec1D) -> Result<Tensor<T>> {
    let t_out = check_conv1d(input, weights, spec)?;
    let mut out = Tensor::zeros(&[t_out, spec.out_channels]);
    conv1d_raw(spec, input.data(), input.dim(0), weights.data(), out.data_mut(), false);
    Ok(out)
}

/// Gradients of [`conv1d`] with respect to its input and weights.
pub fn conv1d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    spec: &ConvSpec1D,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let t_out = check_conv1d(input, weights, spec)?;
    if grad_out.shape() != [t_out, spec.out_channels] {
        return Err(Error::Shape {
            op: "conv1d_backward",
            dim: "grad_out elements",
            expected: t_out * spec.out_channels,
            actual: grad_out.len(),
        });
    }
    let mut gx = Tensor::zeros(input.shape());
    let mut gw = Tensor::zeros(weights.shape());
    conv1d_raw_backward(
        spec,
        input.data(),
        input.dim(0),
        weights.data(),
        grad_out.data(),
        Some(gx.data_mut()),
        gw.data_mut(),
    );
    Ok((gx, gw))
}

/// Geometry of a 3×3 same-padded convolution with frequency striding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub frames: usize,
    pub freq_in: usize,
    pub freq_out: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub freq_stride: usize,
}

impl Conv2dGeometry {
    pub fn new(
        frames: usize,
        freq_in: usize,
        in_channels: usize,
        out_channels: usize,
        freq_stride: usize,
    ) -> Result<Self> {
        Self::with_min_freq(frames, freq_in, in_channels, out_channels, freq_stride, 3)
    }

    fn with_min_freq(
        frames: usize,
        freq_in: usize,
        in_channels: usize,
        out_channels: usize,
        freq_stride: usize,
        min_freq: usize,
    ) -> Result<Self> {
        if !(1..=2).contains(&freq_stride) {
            return Err(Error::config(format!(
                "conv2d frequency stride must be 1 or 2, got {freq_stride}"
            )));
        }
        if freq_in < min_freq {
            return Err(Error::Shape {
                op: "conv2d",
                dim: "frequency bins (minimum)",
                expected: min_freq,
                actual: freq_in,
            });
        }
        Ok(Conv2dGeometry {
            frames,
            freq_in,
            freq_out: freq_in.div_ceil(freq_stride),
            in_channels,
            out_channels,
            freq_stride,
        })
    }

    fn patch(&self) -> usize {
        9 * self.in_channels
    }
}

/// Gather 3×3 zero-padded patches into `[T·F', 9·Cin]`.
pub(crate) fn im2col<T: Real>(g: &Conv2dGeometry, x: &[T]) -> Vec<T> {
    let cin = g.in_channels;
    let patch = g.patch();
    let mut cols = vec![T::zero(); g.frames * g.freq_out * patch];
    for t in 0..g.frames {
        for fo in 0..g.freq_out {
            let row = &mut cols[(t * g.freq_out + fo) * patch..][..patch];
            for dt in 0..3 {
                let ti = t as isize + dt as isize - 1;
                if ti < 0 || ti >= g.frames as isize {
                    continue;
                }
                for df in 0..3 {
                    let fi = (fo * g.freq_stride) as isize + df as isize - 1;
                    if fi < 0 || fi >= g.freq_in as isize {
                        continue;
                    }
                    let src = (ti as usize * g.freq_in + fi as usize) * cin;
                    row[(dt * 3 + df) * cin..][..cin].copy_from_slice(&x[src..src + cin]);
                }
            }
        }
    }
    cols
}

/// Scatter-add patch gradients back onto the input grid.
pub(crate) fn col2im<T: Real>(g: &Conv2dGeometry, cols: &[T], grad_x: &mut [T]) {
    let cin = g.in_channels;
    let patch = g.patch();
    for t in 0..g.frames {
        for fo in 0..g.freq_out {
            let row = &cols[(t * g.freq_out + fo) * patch..][..patch];
            for dt in 0..3 {
                let ti = t as isize + dt as isize - 1;
                if ti < 0 || ti >= g.frames as isize {
                    continue;
                }
                for df in 0..3 {
                    let fi = (fo * g.freq_stride) as isize + df as isize - 1;
                    if fi < 0 || fi >= g.freq_in as isize {
                        continue;
                    }
                    let dst = (ti as usize * g.freq_in + fi as usize) * cin;
                    for (d, &s) in grad_x[dst..dst + cin]
                        .iter_mut()
                        .zip(&row[(dt * 3 + df) * cin..][..cin])
                    {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn check_conv2d<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    freq_stride: usize,
    min_freq: usize,
) -> Result<Conv2dGeometry> {
    if input.rank() != 3 {
        return Err(Error::Shape {
            op: "conv2d",
            dim: "input rank",
            expected: 3,
            actual: input.rank(),
        });
    }
    if weights.rank() != 4 || weights.dim(0) != 3 || weights.dim(1) != 3 {
        return Err(Error::Shape {
            op: "conv2d",
            dim: "weight kernel elements (3×3)",
            expected: 9,
            actual: if weights.rank() >= 2 {
                weights.dim(0) * weights.dim(1)
            } else {
                0
            },
        });
    }
    if weights.dim(2) != input.dim(2) {
        return Err(Error::Shape {
            op: "conv2d",
            dim: "weight input channels",
            expected: input.dim(2),
            actual: weights.dim(2),
        });
    }
    Conv2dGeometry::with_min_freq(
        input.dim(0),
        input.dim(1),
        input.dim(2),
        weights.dim(3),
        freq_stride,
        min_freq,
    )
}

/// Same-padded 3×3 correlation of a `[T, F, Cin]` input with `[3, 3, Cin, Cout]`
/// weights, striding the frequency axis; output `[T, ceil(F / stride), Cout]`.
pub fn conv2d<T: Real>(input: &Tensor<T>, weights: &Tensor<T>, freq_stride: usize) -> Result<Tensor<T>> {
    conv2d_impl(input, weights, freq_stride, 3)
}

/// Deep stem layers see as few as one or two bins after repeated halving;
/// zero padding keeps the 3×3 correlation well defined there.
pub(crate) fn conv2d_impl<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    freq_stride: usize,
    min_freq: usize,
) -> Result<Tensor<T>> {
    let g = check_conv2d(input, weights, freq_stride, min_freq)?;
    let cols = im2col(&g, input.data());
    let mut out = Tensor::zeros(&[g.frames, g.freq_out, g.out_channels]);
    gemm_nn(
        g.frames * g.freq_out,
        g.patch(),
        g.out_channels,
        &cols,
        weights.data(),
        out.data_mut(),
        false,
    );
    Ok(out)
}

/// Gradients of [`conv2d`] with respect to its input and weights.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    freq_stride: usize,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    conv2d_backward_impl(input, weights, freq_stride, grad_out, 3)
}

pub(crate) fn conv2d_backward_impl<T: Real>(
    input: &Tensor<T>,
    weights: &Tensor<T>,
    freq_stride: usize,
    grad_out: &Tensor<T>,
    min_freq: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let g = check_conv2d(input, weights, freq_stride, min_freq)?;
    if grad_out.shape() != [g.frames, g.freq_out, g.out_channels] {
        return Err(Error::Shape {
            op: "conv2d_backward",
            dim: "grad_out elements",
            expected: g.frames * g.freq_out * g.out_channels,
            actual: grad_out.len(),
        });
    }
    let cols = im2col(&g, input.data());
    let rows = g.frames * g.freq_out;
    let mut gw = Tensor::zeros(weights.shape());
    gemm_tn(
        g.patch(),
        rows,
        g.out_channels,
        &cols,
        grad_out.data(),
        gw.data_mut(),
        false,
    );
    let mut gcols = vec![T::zero(); rows * g.patch()];
    gemm_nt(
        rows,
        g.out_channels,
        g.patch(),
        grad_out.data(),
        weights.data(),
        &mut gcols,
        false,
    );
    let mut gx = Tensor::zeros(input.shape());
    col2im(&g, &gcols, gx.data_mut());
    Ok((gx, gw))
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Pass `grad` where `input > 0`, zero elsewhere.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad: &Tensor<T>) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data).expect("relu_backward shape")
}

pub fn add<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "add",
            dim: "element count",
            expected: a.len(),
            actual: b.len(),
        });
    }
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::from_vec(a.shape(), data)
}

pub fn scale<T: Real>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|v| v * s)
}

/// Concatenate along the trailing channel axis, preserving operand order.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
    let lead = &first.shape()[..first.rank() - 1];
    let rows = first.rows();
    for p in parts {
        if p.rank() != first.rank() || &p.shape()[..p.rank() - 1] != lead {
            return Err(Error::Shape {
                op: "concat_channels",
                dim: "frames",
                expected: rows,
                actual: p.rows(),
            });
        }
    }
    let total: usize = parts.iter().map(|p| p.channels()).sum();
    let mut data = Vec::with_capacity(rows * total);
    for r in 0..rows {
        for p in parts {
            data.extend_from_slice(p.row(r));
        }
    }
    let mut shape = lead.to_vec();
    shape.push(total);
    Tensor::from_vec(&shape, data)
}

/// Inverse of [`concat_channels`]: split the channel axis into blocks of the given widths.
pub fn split_channels<T: Real>(x: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = widths.iter().sum();
    if total != x.channels() {
        return Err(Error::Shape {
            op: "split_channels",
            dim: "channels",
            expected: total,
            actual: x.channels(),
        });
    }
    let lead = &x.shape()[..x.rank() - 1];
    let mut out: Vec<Vec<T>> = widths.iter().map(|w| Vec::with_capacity(w * x.rows())).collect();
    for r in 0..x.rows() {
        let row = x.row(r);
        let mut start = 0;
        for (o, &w) in out.iter_mut().zip(widths) {
            o.extend_from_slice(&row[start..start + w]);
            start += w;
        }
    }
    out.into_iter()
        .zip(widths)
        .map(|(d, &w)| {
            let mut shape = lead.to_vec();
            shape.push(w);
            Tensor::from_vec(&shape, d)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random<T: Real>(shape: &[usize], seed: u64) -> Tensor<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| T::of(rng.gen_range(-1.0..1.0)))
    }

    /// Weights scaled like a real initialization so sums stay O(1).
    fn random_weights<T: Real>(shape: &[usize], fan_in: usize, seed: u64) -> Tensor<T> {
        let s = 1.0 / (fan_in as f64).sqrt();
        random::<f64>(shape, seed).map(|v| v * s).cast()
    }

    /// Direct triple-loop summation, independent of the gemm path.
    fn conv1d_oracle<T: Real>(x: &Tensor<T>, w: &Tensor<T>, taps: &[isize]) -> Tensor<T> {
        let (t_in, cin) = (x.dim(0), x.dim(1));
        let cout = w.dim(2);
        let min = taps[0];
        let t_out = t_in - (taps[taps.len() - 1] - min) as usize;
        let mut out = Tensor::zeros(&[t_out, cout]);
        for t in 0..t_out {
            let center = t as isize - min;
            for o in 0..cout {
                let mut acc = T::zero();
                for (k, &tap) in taps.iter().enumerate() {
                    let src = (center + tap) as usize;
                    for c in 0..cin {
                        acc += x.data()[src * cin + c] * w.data()[(k * cin + c) * cout + o];
                    }
                }
                out.data_mut()[t * cout + o] = acc;
            }
        }
        out
    }

    fn conv2d_oracle<T: Real>(x: &Tensor<T>, w: &Tensor<T>, stride: usize) -> Tensor<T> {
        let (t, f, cin) = (x.dim(0), x.dim(1), x.dim(2));
        let cout = w.dim(3);
        let fo_n = f.div_ceil(stride);
        let mut out = Tensor::zeros(&[t, fo_n, cout]);
        for ti in 0..t as isize {
            for fo in 0..fo_n as isize {
                for o in 0..cout {
                    let mut acc = T::zero();
                    for dt in -1..=1isize {
                        for df in -1..=1isize {
                            let (st, sf) = (ti + dt, fo * stride as isize + df);
                            if st < 0 || sf < 0 || st >= t as isize || sf >= f as isize {
                                continue;
                            }
                            for c in 0..cin {
                                let xv = x.data()[((st as usize) * f + sf as usize) * cin + c];
                                let wv = w.data()[(((dt + 1) * 3 + df + 1) as usize * cin + c) * cout + o];
                                acc += xv * wv;
                            }
                        }
                    }
                    out.data_mut()[((ti as usize) * fo_n + fo as usize) * cout + o] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv1d_output_length() {
        let spec = ConvSpec1D::dilated3(1, 1, 3).unwrap();
        let y = conv1d(&Tensor::<f32>::zeros(&[10, 1]), &Tensor::zeros(&[3, 1, 1]), &spec).unwrap();
        assert_eq!(y.shape(), &[4, 1]);
    }

    #[test]
    fn conv1d_identity_kernel() {
        let spec = ConvSpec1D::new(3, 3, vec![0]).unwrap();
        let x = random::<f32>(&[6, 3], 1);
        let w = Tensor::identity(3).reshape(&[1, 3, 3]).unwrap();
        assert_eq!(conv1d(&x, &w, &spec).unwrap(), x);
    }

    #[test]
    fn conv1d_matches_direct_sum() {
        let spec = ConvSpec1D::new(2, 3, vec![-2, 0, 2]).unwrap();
        let x = random::<f64>(&[8, 2], 2);
        let w = random::<f64>(&[3, 2, 3], 3);
        let oracle = conv1d_oracle(&x, &w, spec.taps());
        let y64 = conv1d(&x, &w, &spec).unwrap();
        assert!(y64.max_abs_diff(&oracle) < 1e-12);
        let y32 = conv1d(&x.cast::<f32>(), &w.cast::<f32>(), &spec).unwrap();
        assert!(y32.cast::<f64>().max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn conv1d_errors() {
        let spec = ConvSpec1D::dilated3(2, 3, 3).unwrap();
        let w = Tensor::<f32>::zeros(&[3, 2, 3]);
        let short = conv1d(&Tensor::zeros(&[6, 2]), &w, &spec).unwrap_err();
        assert!(short.to_string().contains("insufficient temporal context"), "{short}");
        let bad = conv1d(&Tensor::zeros(&[10, 4]), &w, &spec).unwrap_err();
        assert!(bad.to_string().contains("input channels"), "{bad}");
        let badw = conv1d(&Tensor::<f32>::zeros(&[10, 2]), &Tensor::zeros(&[3, 2, 4]), &spec).unwrap_err();
        assert!(badw.to_string().contains("weight output channels"), "{badw}");
        assert!(ConvSpec1D::new(1, 1, vec![0, 0]).is_err());
        assert!(ConvSpec1D::new(1, 1, vec![]).is_err());
    }

    #[test]
    fn conv2d_shapes_and_zero_input() {
        let w = random::<f32>(&[3, 3, 1, 4], 4);
        let y = conv2d(&Tensor::zeros(&[5, 40, 1]), &w, 2).unwrap();
        assert_eq!(y.shape(), &[5, 20, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
        assert!(conv2d(&Tensor::<f32>::zeros(&[5, 2, 1]), &w, 1).is_err());
        assert!(conv2d(&Tensor::<f32>::zeros(&[5, 8, 1]), &w, 3).is_err());
    }

    #[test]
    fn conv2d_averaging_kernel_matches_direct_sum() {
        let x = random::<f64>(&[5, 5, 1], 5);
        let w = Tensor::full(&[3, 3, 1, 1], 1.0 / 9.0);
        let y = conv2d(&x, &w, 1).unwrap();
        let oracle = conv2d_oracle(&x, &w, 1);
        assert!(y.max_abs_diff(&oracle) < 1e-12);
        // center cell averages its full 3×3 neighborhood
        let mut center = 0.0;
        for t in 1..4 {
            for f in 1..4 {
                center += x.data()[t * 5 + f] / 9.0;
            }
        }
        assert!((y.data()[2 * 5 + 2] - center).abs() < 1e-12);
    }

    #[test]
    fn conv2d_strided_multichannel_matches_direct_sum() {
        let x = random::<f64>(&[4, 7, 3], 6);
        let w = random::<f64>(&[3, 3, 3, 2], 7);
        for stride in [1, 2] {
            let y = conv2d(&x, &w, stride).unwrap();
            assert!(y.max_abs_diff(&conv2d_oracle(&x, &w, stride)) < 1e-12);
        }
    }

    #[test]
    fn matmul_cases() {
        let b = random::<f32>(&[3, 4], 8);
        assert_eq!(matmul(&Tensor::identity(3), &b).unwrap(), b);
        let one = matmul(&Tensor::from_rows(&[vec![2.0f32]]), &Tensor::from_rows(&[vec![3.0]])).unwrap();
        assert_eq!(one.data(), &[6.0]);
        let a = random::<f64>(&[4, 5], 9);
        let b = random::<f64>(&[5, 3], 10);
        let c = matmul(&a.cast::<f32>(), &b.cast::<f32>()).unwrap();
        let mut naive = Tensor::<f64>::zeros(&[4, 3]);
        for i in 0..4 {
            for j in 0..3 {
                naive.data_mut()[i * 3 + j] = (0..5).map(|p| a.data()[i * 5 + p] * b.data()[p * 3 + j]).sum();
            }
        }
        assert!(c.cast::<f64>().max_abs_diff(&naive) < 1e-6);
        assert!(matmul(&a, &a).unwrap_err().to_string().contains("inner dimension"));
    }

    #[test]
    fn large_gemm_variants_agree_with_oracle() {
        // big enough to cross the parallel threshold and the k blocking
        let (m, k, n) = (37, 300, 41);
        let a = random::<f64>(&[m, k], 11);
        let b = random::<f64>(&[k, n], 12);
        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, a.data(), b.data(), &mut c, false);
        let at = transpose(a.data(), m, k);
        let mut c_tn = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, b.data(), &mut c_tn, false);
        let bt = transpose(b.data(), k, n);
        let mut c_nt = vec![0.0; m * n];
        gemm_nt(m, k, n, a.data(), &bt, &mut c_nt, false);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a.data()[i * k + p] * b.data()[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-10);
                assert!((c_tn[i * n + j] - want).abs() < 1e-10);
                assert!((c_nt[i * n + j] - want).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn elementwise_ops() {
        let x = Tensor::from_rows(&[vec![-1.0f32, 0.0, 2.0]]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let g = Tensor::from_rows(&[vec![5.0f32, 5.0, 5.0]]);
        assert_eq!(relu_backward(&x, &g).data(), &[0.0, 0.0, 5.0]);
        assert_eq!(add(&x, &x).unwrap().data(), &[-2.0, 0.0, 4.0]);
        assert_eq!(scale(&x, 0.5).data(), &[-0.5, 0.0, 1.0]);
    }

    #[test]
    fn concat_of_three_512_streams() {
        let parts: Vec<Tensor<f32>> = (1..=3).map(|v| Tensor::full(&[4, 512], v as f32)).collect();
        let refs: Vec<&Tensor<f32>> = parts.iter().collect();
        let c = concat_channels(&refs).unwrap();
        assert_eq!(c.shape(), &[4, 1536]);
        for r in 0..4 {
            let row = c.row(r);
            assert!(row[..512].iter().all(|&v| v == 1.0));
            assert!(row[512..1024].iter().all(|&v| v == 2.0));
            assert!(row[1024..].iter().all(|&v| v == 3.0));
        }
        let short = Tensor::<f32>::zeros(&[3, 8]);
        assert!(concat_channels(&[&parts[0], &short]).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn conv1d_is_linear(seed in 0u64..10_000, alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
            let spec = ConvSpec1D::dilated3(3, 2, 2).unwrap();
            let x = random::<f64>(&[9, 3], seed);
            let y = random::<f64>(&[9, 3], seed + 1);
            let w = random::<f64>(&[3, 3, 2], seed + 2);
            let mix = Tensor::from_vec(&[9, 3], x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect()).unwrap();
            let lhs = conv1d(&mix, &w, &spec).unwrap();
            let cx = conv1d(&x, &w, &spec).unwrap();
            let cy = conv1d(&y, &w, &spec).unwrap();
            let rhs = add(&scale(&cx, alpha), &scale(&cy, beta)).unwrap();
            prop_assert!(lhs.max_abs_diff(&rhs) < 1e-5);
        }

        #[test]
        fn conv1d_is_time_equivariant(seed in 0u64..10_000, shift in 1usize..4) {
            let spec = ConvSpec1D::dilated3(2, 2, 2).unwrap();
            let x = random::<f32>(&[14, 2], seed);
            let w = random::<f32>(&[3, 2, 2], seed + 7);
            let full = conv1d(&x, &w, &spec).unwrap();
            let shifted_in = Tensor::from_vec(&[14 - shift, 2], x.data()[shift * 2..].to_vec()).unwrap();
            let shifted = conv1d(&shifted_in, &w, &spec).unwrap();
            prop_assert_eq!(shifted.data(), &full.data()[shift * 2..]);
        }

        #[test]
        fn kernels_agree_with_loop_oracles(seed in 0u64..10_000, t in 5usize..16, cin in 1usize..8, cout in 1usize..8, r in 1usize..3) {
            let spec = ConvSpec1D::dilated3(cin, cout, r).unwrap();
            prop_assume!(t > 2 * r);
            let x = random::<f64>(&[t, cin], seed);
            let w = random_weights::<f64>(&[3, cin, cout], 3 * cin, seed + 3);
            prop_assert!(conv1d(&x, &w, &spec).unwrap().max_abs_diff(&conv1d_oracle(&x, &w, spec.taps())) < 1e-12);
            let (x32, w32) = (x.cast::<f32>(), w.cast::<f32>());
            let o32 = conv1d_oracle(&x32, &w32, spec.taps());
            prop_assert!(conv1d(&x32, &w32, &spec).unwrap().max_abs_diff(&o32) < 1e-6);

            let x2 = random::<f64>(&[t, 3 + cin % 4, cin], seed + 5);
            let w2 = random_weights::<f64>(&[3, 3, cin, cout], 9 * cin, seed + 6);
            let stride = 1 + (seed as usize % 2);
            prop_assert!(conv2d(&x2, &w2, stride).unwrap().max_abs_diff(&conv2d_oracle(&x2, &w2, stride)) < 1e-12);
            let (x2_32, w2_32) = (x2.cast::<f32>(), w2.cast::<f32>());
            let o2_32 = conv2d_oracle(&x2_32, &w2_32, stride);
            prop_assert!(conv2d(&x2_32, &w2_32, stride).unwrap().max_abs_diff(&o2_32) < 1e-6);

            let (m, k, n) = (t, cin + 1, cout);
            let a = random::<f64>(&[m, k], seed + 8);
            let b = random_weights::<f64>(&[k, n], k, seed + 9);
            let mut naive = Tensor::<f32>::zeros(&[m, n]);
            let (a32, b32) = (a.cast::<f32>(), b.cast::<f32>());
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0f32;
                    for p in 0..k {
                        acc += a32.data()[i * k + p] * b32.data()[p * n + j];
                    }
                    naive.data_mut()[i * n + j] = acc;
                }
            }
            prop_assert!(matmul(&a32, &b32).unwrap().max_abs_diff(&naive) < 1e-6);
        }

        #[test]
        fn concat_then_split_recovers_operands(seed in 0u64..10_000, widths in proptest::collection::vec(1usize..6, 1..5)) {
            let parts: Vec<Tensor<f32>> = widths.iter().enumerate().map(|(i, &w)| random(&[2, 3, w], seed + i as u64)).collect();
            let refs: Vec<&Tensor<f32>> = parts.iter().collect();
            let joined = concat_channels(&refs).unwrap();
            prop_assert_eq!(split_channels(&joined, &widths).unwrap(), parts);
        }
    }
}
