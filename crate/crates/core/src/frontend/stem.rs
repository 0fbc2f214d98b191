//! 2-D convolutional stem for log-mel input.

use crate::error::{Error, Result};
use crate::layers::{
    join_name, BatchNorm, BatchNormConfig, BufferVisitor, BufferVisitorMut, Conv2d, Layer, Mode, ParamVisitor,
    ParamVisitorMut, Relu,
};
use crate::tensor::{Real, Tensor};

/// Channel widths of the five-layer stem.
pub const DEFAULT_STEM_CHANNELS: [usize; 5] = [128, 256, 256, 256, 256];

/// Frequency stride of stem layer `index` (0-based): layers 1, 3, 5 halve the band axis.
pub fn stem_freq_stride(index: usize) -> usize {
    if index.is_multiple_of(2) {
        2
    } else {
        1
    }
}

/// Frequency extent after each stem layer.
pub fn stem_freq_extents(freq_in: usize, layers: usize) -> Vec<usize> {
    let mut f = freq_in;
    (0..layers)
        .map(|i| {
            f = f.div_ceil(stem_freq_stride(i));
            f
        })
        .collect()
}

/// Smallest band count that still has at least one bin after every halving
/// and is at least as wide as the 2^halvings reduction.
pub fn stem_min_freq(layers: usize) -> usize {
    1 << (0..layers).filter(|&i| stem_freq_stride(i) == 2).count()
}

#[derive(Clone, Debug)]
pub struct Conv2dBlock<T> {
    pub conv: Conv2d<T>,
    relu: Relu<T>,
    pub bn: BatchNorm<T>,
}

/// Stack of conv2d → ReLU → batch norm blocks; `[B, T, F]` in,
/// `[B, T, F_final · C_final]` out, time extent preserved.
#[derive(Clone, Debug)]
pub struct Conv2dStem<T> {
    pub blocks: Vec<Conv2dBlock<T>>,
    freq_in: usize,
}

pub fn build_conv2d_stem<T: Real>(
    freq_in: usize,
    channels: &[usize],
    bn: BatchNormConfig,
    seed: u64,
    name: &str,
) -> Result<Conv2dStem<T>> {
    if channels.is_empty() {
        return Err(Error::config("conv2d stem needs at least one layer"));
    }
    let min = stem_min_freq(channels.len());
    if freq_in < min {
        return Err(Error::config(format!(
            "conv2d stem with {} layers needs at least {min} frequency bins, got {freq_in}",
            channels.len()
        )));
    }
    let mut cin = 1;
    let mut blocks = Vec::with_capacity(channels.len());
    for (i, &cout) in channels.iter().enumerate() {
        let lname = join_name(name, &format!("l{i}"));
        blocks.push(Conv2dBlock {
            conv: Conv2d::new(cin, cout, stem_freq_stride(i), seed, &join_name(&lname, "conv"))?,
            relu: Relu::new(),
            bn: BatchNorm::new(cout, bn),
        });
        cin = cout;
    }
    Ok(Conv2dStem { blocks, freq_in })
}

impl<T: Real> Conv2dStem<T> {
    pub fn channel_widths(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.conv.out_channels()).collect()
    }

    pub fn freq_extents(&self) -> Vec<usize> {
        stem_freq_extents(self.freq_in, self.blocks.len())
    }

    pub fn output_dim(&self) -> usize {
        self.freq_extents().last().copied().unwrap_or(self.freq_in) * self.channel_widths().last().copied().unwrap_or(1)
    }

    fn to_grid(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        if input.rank() != 3 || input.dim(2) != self.freq_in {
            return Err(Error::Shape {
                op: "conv2d stem",
                dim: "input frequency bins",
                expected: self.freq_in,
                actual: if input.rank() == 3 { input.dim(2) } else { 0 },
            });
        }
        let shape = [input.dim(0), input.dim(1), self.freq_in, 1];
        input.clone().reshape(&shape)
    }

    fn flatten(x: Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape().to_vec();
        x.reshape(&[s[0], s[1], s[2] * s[3]])
    }
}

impl<T: Real> Layer<T> for Conv2dStem<T> {
    fn kind(&self) -> &'static str {
        "conv2d_stem"
    }

    fn forward(&mut self, input: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let mut x = self.to_grid(input)?;
        for b in &mut self.blocks {
            x = b.conv.forward(&x, mode)?;
            x = b.relu.forward(&x, mode)?;
            x = b.bn.forward(&x, mode)?;
        }
        Self::flatten(x)
    }

    fn infer(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut x = self.to_grid(input)?;
        for b in &self.blocks {
            x = b.bn.infer(&b.relu.infer(&b.conv.infer(&x)?)?)?;
        }
        Self::flatten(x)
    }

    fn backward(&mut self, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let last = self.blocks.last().expect("non-empty stem");
        let f = self.freq_extents().last().copied().unwrap_or(self.freq_in);
        let c = last.conv.out_channels();
        let s = grad_out.shape().to_vec();
        let mut g = grad_out.clone().reshape(&[s[0], s[1], f, c])?;
        for b in self.blocks.iter_mut().rev() {
            g = b.bn.backward(&g)?;
            g = b.relu.backward(&g)?;
            g = b.conv.backward(&g)?;
        }
        let s = g.shape().to_vec();
        g.reshape(&[s[0], s[1], s[2]])
    }

    fn visit_params(&self, f: &mut ParamVisitor<'_, T>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.visit_params(&mut |n, p| f(&format!("l{i}.conv.{n}"), p));
            b.bn.visit_params(&mut |n, p| f(&format!("l{i}.bn.{n}"), p));
        }
    }

    fn visit_params_mut(&mut self, f: &mut ParamVisitorMut<'_, T>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_params_mut(&mut |n, p| f(&format!("l{i}.conv.{n}"), p));
            b.bn.visit_params_mut(&mut |n, p| f(&format!("l{i}.bn.{n}"), p));
        }
    }

    fn visit_buffers(&self, f: &mut BufferVisitor<'_, T>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.bn.visit_buffers(&mut |n, t| f(&format!("l{i}.bn.{n}"), t));
        }
    }

    fn visit_buffers_mut(&mut self, f: &mut BufferVisitorMut<'_, T>) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.bn.visit_buffers_mut(&mut |n, t| f(&format!("l{i}.bn.{n}"), t));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{check_layer_gradients, random};

    #[test]
    fn frequency_schedule() {
        assert_eq!(stem_freq_extents(40, 5), vec![20, 20, 10, 10, 5]);
        assert_eq!(stem_freq_extents(8, 5), vec![4, 4, 2, 2, 1]);
        assert_eq!(stem_min_freq(5), 8);
    }

    #[test]
    fn built_stem_shapes() {
        let stem = build_conv2d_stem::<f32>(40, &DEFAULT_STEM_CHANNELS, BatchNormConfig::default(), 0, "stem").unwrap();
        assert_eq!(stem.channel_widths(), vec![128, 256, 256, 256, 256]);
        assert_eq!(stem.freq_extents(), vec![20, 20, 10, 10, 5]);
        assert_eq!(stem.output_dim(), 1280);
        let small = build_conv2d_stem::<f32>(8, &DEFAULT_STEM_CHANNELS, BatchNormConfig::default(), 0, "stem").unwrap();
        assert_eq!(small.output_dim(), 256);
        assert!(build_conv2d_stem::<f32>(7, &DEFAULT_STEM_CHANNELS, BatchNormConfig::default(), 0, "stem").is_err());
    }

    #[test]
    fn preserves_time_extent() {
        let stem = build_conv2d_stem::<f32>(8, &[4, 4, 4, 4, 4], BatchNormConfig::default(), 1, "stem").unwrap();
        for t in [1, 3, 17] {
            let y = stem.infer(&Tensor::zeros(&[2, t, 8])).unwrap();
            assert_eq!(y.shape(), &[2, t, 4]);
        }
    }

    #[test]
    fn finite_difference_gradients() {
        let mut stem = build_conv2d_stem::<f64>(8, &[2, 3, 2], BatchNormConfig::default(), 3, "stem").unwrap();
        let x = random::<f64>(&[2, 4, 8], 4);
        let err = check_layer_gradients(&mut stem, &x, 5);
        assert!(err < 1e-4, "max relative error {err}");
    }
}
