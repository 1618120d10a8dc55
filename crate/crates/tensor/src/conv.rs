//! NHWC convolution kernels built on im2col + GEMM.
//!
//! A convolution and its transpose share one [`ConvGeometry`], always
//! described in the "forward conv" direction (large input, small output).
//! Kernels are laid out `[kh, kw, in_c, out_c]`, which makes the flattened
//! kernel directly the right-hand GEMM operand of the im2col matrix.

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::exec;

/// Samples handled per work unit for kernel-gradient partial sums. Fixed so
/// that the reduction order never depends on the thread count.
const SAMPLES_PER_UNIT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Padding {
    /// Output spatial size `ceil(in / stride)`, zero padding split
    /// top/left-low like the common framework convention.
    Same,
    /// No padding; output `(in - k) / stride + 1`.
    Valid,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

fn out_extent(input: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(input);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if input < k {
                None
            } else {
                Some(((input - k) / stride + 1, 0))
            }
        }
    }
}

impl ConvGeometry {
    /// Geometry of a forward convolution of `input` (`[n, h, w, c]`) with
    /// `kernel` (`[kh, kw, c, out_c]`).
    pub fn conv(op: &'static str, input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 || input[3] != kernel[2] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op,
                message: "stride must be positive".into(),
            });
        }
        let (kh, kw) = (kernel[0], kernel[1]);
        let bad = || TensorError::ShapeMismatch {
            op,
            lhs: input.to_vec(),
            rhs: kernel.to_vec(),
        };
        let (out_h, pad_top) = out_extent(input[1], kh, stride, padding).ok_or_else(bad)?;
        let (out_w, pad_left) = out_extent(input[2], kw, stride, padding).ok_or_else(bad)?;
        Ok(Self {
            batch: input[0],
            in_h: input[1],
            in_w: input[2],
            in_c: input[3],
            out_h,
            out_w,
            out_c: kernel[3],
            kh,
            kw,
            stride,
            pad_top,
            pad_left,
        })
    }

    /// Geometry for a transposed convolution of `input` (`[n, h, w, c]`)
    /// with `kernel` (`[kh, kw, out_c, c]`). The returned geometry is the
    /// forward conv that maps the transposed output back onto `input`.
    pub fn conv_transpose(input: &[usize], kernel: &[usize], stride: usize, padding: Padding) -> Result<Self> {
        let op = "conv_transpose2d";
        if input.len() != 4 || kernel.len() != 4 || input[3] != kernel[3] {
            return Err(TensorError::ShapeMismatch {
                op,
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::InvalidArgument {
                op,
                message: "stride must be positive".into(),
            });
        }
        let grow = |n: usize, k: usize| match padding {
            Padding::Same => n * stride,
            Padding::Valid => (n - 1) * stride + k,
        };
        let big = [
            input[0],
            grow(input[1], kernel[0]),
            grow(input[2], kernel[1]),
            kernel[2],
        ];
        let geom = Self::conv(op, &big, kernel, stride, padding)?;
        debug_assert_eq!((geom.out_h, geom.out_w), (input[1], input[2]));
        Ok(geom)
    }

    pub fn input_shape(&self) -> [usize; 4] {
        [self.batch, self.in_h, self.in_w, self.in_c]
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.out_h, self.out_w, self.out_c]
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kh, self.kw, self.in_c, self.out_c]
    }

    fn in_sample(&self) -> usize {
        self.in_h * self.in_w * self.in_c
    }

    fn out_sample(&self) -> usize {
        self.out_h * self.out_w * self.out_c
    }

    fn patch(&self) -> usize {
        self.kh * self.kw * self.in_c
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }

    /// Input row/col for an output position and kernel tap, `None` when the
    /// tap falls in the zero padding.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<(usize, usize)> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad_top)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad_left)?;
        (iy < self.in_h && ix < self.in_w).then_some((iy, ix))
    }
}

fn im2col<T: Element>(g: &ConvGeometry, sample: &[T], cols: &mut [T]) {
    let patch = g.patch();
    let c = g.in_c;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &mut cols[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    let dst = &mut row[(ky * g.kw + kx) * c..][..c];
                    match g.source(oy, ox, ky, kx) {
                        Some((iy, ix)) => dst.copy_from_slice(&sample[(iy * g.in_w + ix) * c..][..c]),
                        None => dst.fill(T::ZERO),
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeometry, cols: &[T], sample: &mut [T]) {
    let patch = g.patch();
    let c = g.in_c;
    for oy in 0..g.out_h {
        for ox in 0..g.out_w {
            let row = &cols[(oy * g.out_w + ox) * patch..][..patch];
            for ky in 0..g.kh {
                for kx in 0..g.kw {
                    if let Some((iy, ix)) = g.source(oy, ox, ky, kx) {
                        let src = &row[(ky * g.kw + kx) * c..][..c];
                        let dst = &mut sample[(iy * g.in_w + ix) * c..][..c];
                        for (d, &s) in dst.iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution: `[n, in_h, in_w, in_c]` → `[n, out_h, out_w, out_c]`.
pub fn conv_forward<T: Element>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let (in_s, out_s, patch, pos) = (g.in_sample(), g.out_sample(), g.patch(), g.positions());
    let mut out = vec![T::ZERO; g.batch * out_s];
    exec::for_each_chunk_mut(&mut out, out_s, |n, y| {
        let mut cols = vec![T::ZERO; pos * patch];
        im2col(g, &input[n * in_s..][..in_s], &mut cols);
        T::gemm(
            pos,
            patch,
            g.out_c,
            T::ONE,
            &cols,
            (patch as isize, 1),
            kernel,
            (g.out_c as isize, 1),
            T::ZERO,
            y,
            (g.out_c as isize, 1),
        );
    });
    out
}

/// Adjoint of [`conv_forward`] with respect to its input.
pub fn conv_backward_input<T: Element>(g: &ConvGeometry, grad_out: &[T], kernel: &[T]) -> Vec<T> {
    let (in_s, out_s, patch, pos) = (g.in_sample(), g.out_sample(), g.patch(), g.positions());
    let mut dx = vec![T::ZERO; g.batch * in_s];
    exec::for_each_chunk_mut(&mut dx, in_s, |n, dx| {
        let mut cols = vec![T::ZERO; pos * patch];
        // dcols = dy · Kᵀ
        T::gemm(
            pos,
            g.out_c,
            patch,
            T::ONE,
            &grad_out[n * out_s..][..out_s],
            (g.out_c as isize, 1),
            kernel,
            (1, g.out_c as isize),
            T::ZERO,
            &mut cols,
            (patch as isize, 1),
        );
        col2im_add(g, &cols, dx);
    });
    dx
}

/// Gradient of [`conv_forward`] with respect to the kernel.
pub fn conv_backward_kernel<T: Element>(g: &ConvGeometry, input: &[T], grad_out: &[T]) -> Vec<T> {
    let (in_s, out_s, patch, pos) = (g.in_sample(), g.out_sample(), g.patch(), g.positions());
    let klen = patch * g.out_c;
    let units = g.batch.div_ceil(SAMPLES_PER_UNIT);
    let partials = exec::map_indexed(units, |u| {
        let mut dk = vec![T::ZERO; klen];
        let mut cols = vec![T::ZERO; pos * patch];
        let end = ((u + 1) * SAMPLES_PER_UNIT).min(g.batch);
        for n in u * SAMPLES_PER_UNIT..end {
            im2col(g, &input[n * in_s..][..in_s], &mut cols);
            // dK += colsᵀ · dy
            T::gemm(
                patch,
                pos,
                g.out_c,
                T::ONE,
                &cols,
                (1, patch as isize),
                &grad_out[n * out_s..][..out_s],
                (g.out_c as isize, 1),
                T::ONE,
                &mut dk,
                (g.out_c as isize, 1),
            );
        }
        dk
    });
    let mut iter = partials.into_iter();
    let mut total = iter.next().unwrap_or_else(|| vec![T::ZERO; klen]);
    for part in iter {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_padding_geometry() {
        let g = ConvGeometry::conv("conv2d", &[1, 32, 32, 3], &[3, 3, 3, 32], 2, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.out_w, g.pad_top), (16, 16, 0));
        let g = ConvGeometry::conv("conv2d", &[1, 5, 5, 1], &[3, 3, 1, 1], 1, Padding::Same).unwrap();
        assert_eq!((g.out_h, g.pad_top), (5, 1));
    }

    #[test]
    fn valid_rejects_small_input() {
        assert!(ConvGeometry::conv("conv2d", &[1, 2, 2, 1], &[3, 3, 1, 1], 1, Padding::Valid).is_err());
    }

    #[test]
    fn transpose_geometry_inverts_conv() {
        let g = ConvGeometry::conv_transpose(&[2, 4, 4, 128], &[3, 3, 64, 128], 2, Padding::Same).unwrap();
        assert_eq!(g.input_shape(), [2, 8, 8, 64]);
        assert_eq!(g.output_shape(), [2, 4, 4, 128]);
    }
}
