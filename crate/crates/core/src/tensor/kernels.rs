//! Raw NCHW compute kernels. The graph layer wraps these with shape checks
//! and gradient rules.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Resolved geometry of a 2-D correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::config(format!(
                "conv2d expects 4-D input and kernel, got {input:?} and {kernel:?}"
            )));
        }
        let (n, c, h, w) = (input[0], input[1], input[2], input[3]);
        let (f, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c {
            return Err(Error::config(format!(
                "conv2d kernel expects {kc} input channels, input has {c}"
            )));
        }
        if stride.0 == 0 || stride.1 == 0 {
            return Err(Error::config("conv2d stride must be >= 1"));
        }
        if kh > h + 2 * padding.0 || kw > w + 2 * padding.1 {
            return Err(Error::config(format!(
                "conv2d kernel {kh}x{kw} larger than padded input {}x{}",
                h + 2 * padding.0,
                w + 2 * padding.1
            )));
        }
        Ok(ConvGeometry {
            batch: n,
            in_channels: c,
            height: h,
            width: w,
            filters: f,
            kernel: (kh, kw),
            stride,
            padding,
            out_height: (h + 2 * padding.0 - kh) / stride.0 + 1,
            out_width: (w + 2 * padding.1 - kw) / stride.1 + 1,
        })
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.batch, self.filters, self.out_height, self.out_width]
    }

    /// Rows of the patch matrix: one per (channel, ky, kx).
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn out_pixels(&self) -> usize {
        self.out_height * self.out_width
    }

    fn source(&self, oy: usize, ky: usize, ox: usize, kx: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride.0 + ky) as isize - self.padding.0 as isize;
        let x = (ox * self.stride.1 + kx) as isize - self.padding.1 as isize;
        if y < 0 || x < 0 || y >= self.height as isize || x >= self.width as isize {
            None
        } else {
            Some((y as usize, x as usize))
        }
    }
}

/// Direct nested-loop correlation.
pub fn conv2d_direct<T: Scalar>(input: &[T], kernel: &[T], g: &ConvGeometry) -> Vec<T> {
    let (kh, kw) = g.kernel;
    let mut out = vec![T::zero(); g.batch * g.filters * g.out_pixels()];
    for n in 0..g.batch {
        for f in 0..g.filters {
            for oy in 0..g.out_height {
                for ox in 0..g.out_width {
                    let mut acc = T::zero();
                    for c in 0..g.in_channels {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                if let Some((y, x)) = g.source(oy, ky, ox, kx) {
                                    let xv = input[((n * g.in_channels + c) * g.height + y) * g.width + x];
                                    let wv = kernel[((f * g.in_channels + c) * kh + ky) * kw + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                    }
                    out[((n * g.filters + f) * g.out_height + oy) * g.out_width + ox] = acc;
                }
            }
        }
    }
    out
}

/// Unfolds one sample `[C, H, W]` into a `[C*kh*kw, oh*ow]` patch matrix.
pub fn im2col<T: Scalar>(sample: &[T], g: &ConvGeometry, cols: &mut [T]) {
    let (kh, kw) = g.kernel;
    let pixels = g.out_pixels();
    debug_assert_eq!(cols.len(), g.patch_len() * pixels);
    for c in 0..g.in_channels {
        let plane = &sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let dst = &mut cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_height {
                    for ox in 0..g.out_width {
                        dst[oy * g.out_width + ox] = match g.source(oy, ky, ox, kx) {
                            Some((y, x)) => plane[y * g.width + x],
                            None => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Scatters a patch-matrix gradient back onto one sample, accumulating.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry, sample: &mut [T]) {
    let (kh, kw) = g.kernel;
    let pixels = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &mut sample[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (c * kh + ky) * kw + kx;
                let src = &cols[row * pixels..(row + 1) * pixels];
                for oy in 0..g.out_height {
                    for ox in 0..g.out_width {
                        if let Some((y, x)) = g.source(oy, ky, ox, kx) {
                            plane[y * g.width + x] += src[oy * g.out_width + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Patch-matrix correlation: per sample, `kernel[F, C*kh*kw] x cols`.
///
/// Returns the output and the patch matrices (reused by the backward pass).
pub fn conv2d_im2col<T: Scalar>(input: &[T], kernel: &[T], g: &ConvGeometry) -> (Vec<T>, Vec<T>) {
    let patch = g.patch_len();
    let pixels = g.out_pixels();
    let sample_len = g.in_channels * g.height * g.width;
    let mut cols = vec![T::zero(); g.batch * patch * pixels];
    let mut out = vec![T::zero(); g.batch * g.filters * pixels];
    for n in 0..g.batch {
        let c = &mut cols[n * patch * pixels..(n + 1) * patch * pixels];
        im2col(&input[n * sample_len..(n + 1) * sample_len], g, c);
        let o = &mut out[n * g.filters * pixels..(n + 1) * g.filters * pixels];
        T::gemm(
            g.filters,
            patch,
            pixels,
            T::one(),
            kernel,
            (patch as isize, 1),
            c,
            (pixels as isize, 1),
            T::zero(),
            o,
            (pixels as isize, 1),
        );
    }
    (out, cols)
}

/// `[N, D] x [D, K]` plus optional bias.
pub fn dense<T: Scalar>(input: &[T], weight: &[T], bias: Option<&[T]>, n: usize, d: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * k];
    if let Some(b) = bias {
        for row in out.chunks_mut(k) {
            row.copy_from_slice(b);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(n, d, k, T::one(), input, (d as isize, 1), weight, (k as isize, 1), beta, &mut out, (k as isize, 1));
    out
}
