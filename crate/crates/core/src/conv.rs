//! Strided, zero-padded cross-correlation over three spatial axes.
//!
//! Lower-rank convolutions are expressed by setting the leading spatial
//! extents to 1. A [`ConvGeom`] always describes the *forward* map from the
//! large space `x` to the small space `y`; a transposed convolution runs the
//! same geometry backwards (it is the exact adjoint).

use crate::error::{shape_err, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    /// Channels of the `x` space.
    pub x_channels: usize,
    /// Channels of the `y` space (number of kernels).
    pub y_channels: usize,
    pub x: [usize; 3],
    pub y: [usize; 3],
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvGeom {
    /// Geometry of a forward convolution taking `x` to `y`.
    pub fn forward(
        x_channels: usize,
        y_channels: usize,
        x: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<Self> {
        let mut y = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || kernel[a] == 0 {
                return Err(shape_err("conv", "stride and kernel extents must be positive"));
            }
            let padded = x[a] + 2 * pad[a];
            if kernel[a] > padded {
                return Err(shape_err(
                    "conv",
                    format!(
                        "kernel extents {kernel:?} exceed padded input extents {:?}",
                        [x[0] + 2 * pad[0], x[1] + 2 * pad[1], x[2] + 2 * pad[2]]
                    ),
                ));
            }
            y[a] = (padded - kernel[a]) / stride[a] + 1;
        }
        Ok(Self {
            x_channels,
            y_channels,
            x,
            y,
            kernel,
            stride,
            pad,
        })
    }

    /// Geometry of a transposed convolution whose input lives in `y` space.
    /// The produced `x` extents are `(y - 1)·stride - 2·pad + kernel + output_pad`.
    pub fn transposed(
        x_channels: usize,
        y_channels: usize,
        y: [usize; 3],
        kernel: [usize; 3],
        stride: [usize; 3],
        pad: [usize; 3],
        output_pad: [usize; 3],
    ) -> Result<Self> {
        let mut x = [0; 3];
        for a in 0..3 {
            if stride[a] == 0 || kernel[a] == 0 || y[a] == 0 {
                return Err(shape_err("conv_transpose", "extents must be positive"));
            }
            if output_pad[a] >= stride[a] {
                return Err(shape_err("conv_transpose", "output padding must be below stride"));
            }
            let full = (y[a] - 1) * stride[a] + kernel[a] + output_pad[a];
            if full <= 2 * pad[a] {
                return Err(shape_err(
                    "conv_transpose",
                    format!("padding {pad:?} consumes the whole output"),
                ));
            }
            x[a] = full - 2 * pad[a];
        }
        let g = Self::forward(x_channels, y_channels, x, kernel, stride, pad)?;
        if g.y != y {
            return Err(shape_err(
                "conv_transpose",
                format!("inconsistent geometry: {:?} does not map back to {y:?}", g.x),
            ));
        }
        Ok(g)
    }

    pub fn x_positions(&self) -> usize {
        self.x.iter().product()
    }

    pub fn y_positions(&self) -> usize {
        self.y.iter().product()
    }

    pub fn x_len(&self) -> usize {
        self.x_channels * self.x_positions()
    }

    pub fn y_len(&self) -> usize {
        self.y_channels * self.y_positions()
    }

    pub fn taps(&self) -> usize {
        self.kernel.iter().product()
    }

    /// Rows of the unfolded matrix: `x_channels · kd · kh · kw`.
    pub fn col_rows(&self) -> usize {
        self.x_channels * self.taps()
    }

    pub fn kernel_len(&self) -> usize {
        self.y_channels * self.col_rows()
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![
            self.y_channels,
            self.x_channels,
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
        ]
    }

    /// Visits every (unfolded index, x index) pair of the unfolding.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let [xd, xh, xw] = self.x;
        let [yd, yh, yw] = self.y;
        let [kd, kh, kw] = self.kernel;
        let [sd, sh, sw] = self.stride;
        let [pd, ph, pw] = self.pad;
        let ny = self.y_positions();
        for c in 0..self.x_channels {
            for a in 0..kd {
                for b in 0..kh {
                    for e in 0..kw {
                        let row = ((c * kd + a) * kh + b) * kw + e;
                        for od in 0..yd {
                            let id = (od * sd + a) as isize - pd as isize;
                            if id < 0 || id >= xd as isize {
                                continue;
                            }
                            for oh in 0..yh {
                                let ih = (oh * sh + b) as isize - ph as isize;
                                if ih < 0 || ih >= xh as isize {
                                    continue;
                                }
                                let xbase = ((c * xd + id as usize) * xh + ih as usize) * xw;
                                let ybase = (od * yh + oh) * yw;
                                for ow in 0..yw {
                                    let iw = (ow * sw + e) as isize - pw as isize;
                                    if iw < 0 || iw >= xw as isize {
                                        continue;
                                    }
                                    f(row * ny + ybase + ow, xbase + iw as usize);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    /// Unfolds one `x` sample into `cols[col_rows × y_positions]`.
    pub fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        debug_assert_eq!(x.len(), self.x_len());
        cols.iter_mut().for_each(|v| *v = T::zero());
        self.for_each_tap(|ci, xi| cols[ci] = x[xi]);
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates `cols` into `x`.
    pub fn col2im<T: Scalar>(&self, cols: &[T], x: &mut [T]) {
        debug_assert_eq!(x.len(), self.x_len());
        self.for_each_tap(|ci, xi| x[xi] = x[xi] + cols[ci]);
    }
}

/// `y = conv(x)` for a batch of `batch` samples laid out contiguously.
pub fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], kernel: &[T], batch: usize) -> Vec<T> {
    let (rows, ny) = (g.col_rows(), g.y_positions());
    let mut cols = vec![T::zero(); rows * ny];
    let mut y = vec![T::zero(); batch * g.y_len()];
    for (xb, yb) in x.chunks_exact(g.x_len()).zip(y.chunks_exact_mut(g.y_len())) {
        g.im2col(xb, &mut cols);
        T::gemm(g.y_channels, rows, ny, kernel, rows, 1, &cols, ny, 1, T::zero(), yb, ny, 1);
    }
    y
}

/// Gradients of [`conv_forward`] with respect to its input and kernel.
pub fn conv_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    kernel: &[T],
    grad_y: &[T],
    batch: usize,
) -> (Vec<T>, Vec<T>) {
    let (rows, ny) = (g.col_rows(), g.y_positions());
    let mut cols = vec![T::zero(); rows * ny];
    let mut dcols = vec![T::zero(); rows * ny];
    let mut gx = vec![T::zero(); batch * g.x_len()];
    let mut gk = vec![T::zero(); g.kernel_len()];
    for b in 0..batch {
        let xb = &x[b * g.x_len()..(b + 1) * g.x_len()];
        let gyb = &grad_y[b * g.y_len()..(b + 1) * g.y_len()];
        g.im2col(xb, &mut cols);
        // dK[K, rows] += gY[K, ny] · colsᵀ
        T::gemm(g.y_channels, ny, rows, gyb, ny, 1, &cols, 1, ny, T::one(), &mut gk, rows, 1);
        // dcols[rows, ny] = Kᵀ · gY
        T::gemm(rows, g.y_channels, ny, kernel, 1, rows, gyb, ny, 1, T::zero(), &mut dcols, ny, 1);
        g.col2im(&dcols, &mut gx[b * g.x_len()..(b + 1) * g.x_len()]);
    }
    (gx, gk)
}

/// Transposed convolution: maps a batch in `y` space to `x` space.
pub fn conv_transpose_forward<T: Scalar>(
    g: &ConvGeom,
    y: &[T],
    kernel: &[T],
    batch: usize,
) -> Vec<T> {
    let (rows, ny) = (g.col_rows(), g.y_positions());
    let mut cols = vec![T::zero(); rows * ny];
    let mut x = vec![T::zero(); batch * g.x_len()];
    for (yb, xb) in y.chunks_exact(g.y_len()).zip(x.chunks_exact_mut(g.x_len())) {
        T::gemm(rows, g.y_channels, ny, kernel, 1, rows, yb, ny, 1, T::zero(), &mut cols, ny, 1);
        g.col2im(&cols, xb);
    }
    x
}

/// Gradients of [`conv_transpose_forward`] with respect to its input and kernel.
pub fn conv_transpose_backward<T: Scalar>(
    g: &ConvGeom,
    y: &[T],
    kernel: &[T],
    grad_x: &[T],
    batch: usize,
) -> (Vec<T>, Vec<T>) {
    let (rows, ny) = (g.col_rows(), g.y_positions());
    let mut cols = vec![T::zero(); rows * ny];
    let mut gy = vec![T::zero(); batch * g.y_len()];
    let mut gk = vec![T::zero(); g.kernel_len()];
    for b in 0..batch {
        let yb = &y[b * g.y_len()..(b + 1) * g.y_len()];
        g.im2col(&grad_x[b * g.x_len()..(b + 1) * g.x_len()], &mut cols);
        T::gemm(
            g.y_channels,
            rows,
            ny,
            kernel,
            rows,
            1,
            &cols,
            ny,
            1,
            T::zero(),
            &mut gy[b * g.y_len()..(b + 1) * g.y_len()],
            ny,
            1,
        );
        // dK[K, rows] += y[K, ny] · colsᵀ
        T::gemm(g.y_channels, ny, rows, yb, ny, 1, &cols, 1, ny, T::one(), &mut gk, rows, 1);
    }
    (gy, gk)
}
