//! Parameterised layers built on [`Graph`] operations.

use rand::Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamSet};
use crate::scalar::Scalar;

/// Fully connected layer, `y = x·wᵀ + b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut R,
    ) -> Self {
        let weight = params.add_weight(format!("{name}.weight"), &[outputs, inputs], inputs, rng);
        let bias = params.add_bias(format!("{name}.bias"), outputs);
        Self {
            weight,
            bias,
            inputs,
            outputs,
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamSet<T>, x: Var) -> Result<Var> {
        let w = g.param(p, self.weight);
        let b = g.param(p, self.bias);
        g.linear(x, w, Some(b))
    }
}

/// PReLU slopes, one per channel, initialised at 0.25.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PRelu {
    pub slopes: ParamId,
}

impl PRelu {
    pub fn new<T: Scalar>(params: &mut ParamSet<T>, name: &str, channels: usize) -> Self {
        Self {
            slopes: params.add_slopes(format!("{name}.slope"), channels, 0.25),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamSet<T>, x: Var) -> Result<Var> {
        let a = g.param(p, self.slopes);
        g.prelu(x, a)
    }
}

/// Convolution (or its transpose) with a per-channel bias, over 1 or 3
/// spatial axes depending on the rank of `kernel_size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Conv {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub stride: Vec<usize>,
    pub pad: Vec<usize>,
    pub output_pad: Vec<usize>,
    pub transposed: bool,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    fn build<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: &[usize],
        stride: &[usize],
        pad: &[usize],
        transposed: bool,
        rng: &mut R,
    ) -> Self {
        let taps: usize = kernel.iter().product();
        // kernels are always stored as [y-space channels, x-space channels, ...]
        let (k, c) = if transposed {
            (in_channels, out_channels)
        } else {
            (out_channels, in_channels)
        };
        let mut shape = vec![k, c];
        shape.extend_from_slice(kernel);
        let fan_in = if transposed {
            let s: usize = stride.iter().product();
            (in_channels * taps / s.max(1)).max(1)
        } else {
            in_channels * taps
        };
        let kernel = params.add_weight(format!("{name}.kernel"), &shape, fan_in, rng);
        let bias = params.add_bias(format!("{name}.bias"), out_channels);
        Self {
            kernel,
            bias,
            stride: stride.to_vec(),
            pad: pad.to_vec(),
            output_pad: vec![0; stride.len()],
            transposed,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv3d<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        rng: &mut R,
    ) -> Self {
        Self::build(params, name, in_channels, out_channels, &kernel, &stride, &pad, false, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv3d_transposed<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        rng: &mut R,
    ) -> Self {
        Self::build(params, name, in_channels, out_channels, &kernel, &stride, &pad, true, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv1d<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(params, name, in_channels, out_channels, &[kernel], &[stride], &[pad], false, rng)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv1d_transposed<T: Scalar, R: Rng>(
        params: &mut ParamSet<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        Self::build(params, name, in_channels, out_channels, &[kernel], &[stride], &[pad], true, rng)
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &ParamSet<T>, x: Var) -> Result<Var> {
        let k = g.param(p, self.kernel);
        let b = g.param(p, self.bias);
        let y = match (self.stride.len(), self.transposed) {
            (1, false) => g.conv1d(x, k, self.stride[0], self.pad[0])?,
            (1, true) => g.conv1d_transposed(x, k, self.stride[0], self.pad[0], self.output_pad[0])?,
            (_, false) => g.conv3d(x, k, arr3(&self.stride), arr3(&self.pad))?,
            (_, true) => g.conv3d_transposed(
                x,
                k,
                arr3(&self.stride),
                arr3(&self.pad),
                arr3(&self.output_pad),
            )?,
        };
        g.channel_bias(y, b)
    }
}

fn arr3(v: &[usize]) -> [usize; 3] {
    [v[0], v[1], v[2]]
}
