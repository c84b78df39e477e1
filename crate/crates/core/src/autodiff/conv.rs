//! NHWC im2col / col2im lowering for 2-D convolutions.

use crate::scalar::Scalar;

/// Geometry of a square-kernel convolution from `input` to `output`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output extent of a convolution, `None` if the kernel does not fit.
    pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
    }

    /// Output extent of the matching transposed convolution.
    pub fn transposed_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        ((size - 1) * stride + kernel).checked_sub(2 * pad).filter(|&v| v > 0)
    }

    pub fn col_width(&self) -> usize {
        self.kernel * self.kernel * self.in_c
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k).checked_sub(self.pad)?;
        (pos < extent).then_some(pos)
    }
}

/// Lower `input` ([B,H,W,C]) to a `[B*OH*OW, K*K*C]` patch matrix.
pub fn im2col<T: Scalar>(g: &ConvGeom, input: &[T], cols: &mut [T]) {
    let c = g.in_c;
    let width = g.col_width();
    debug_assert_eq!(cols.len(), g.rows() * width);
    let mut row = 0;
    for b in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let dst_row = &mut cols[row * width..(row + 1) * width];
                for kh in 0..g.kernel {
                    for kw in 0..g.kernel {
                        let dst = &mut dst_row[(kh * g.kernel + kw) * c..][..c];
                        match (g.source(oh, kh, g.in_h), g.source(ow, kw, g.in_w)) {
                            (Some(ih), Some(iw)) => {
                                let src = ((b * g.in_h + ih) * g.in_w + iw) * c;
                                dst.copy_from_slice(&input[src..src + c]);
                            }
                            _ => dst.iter_mut().for_each(|v| *v = T::zero()),
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into `[B,H,W,C]`.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], out: &mut [T]) {
    let c = g.in_c;
    let width = g.col_width();
    let mut row = 0;
    for b in 0..g.batch {
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let src_row = &cols[row * width..(row + 1) * width];
                for kh in 0..g.kernel {
                    let Some(ih) = g.source(oh, kh, g.in_h) else {
                        continue;
                    };
                    for kw in 0..g.kernel {
                        let Some(iw) = g.source(ow, kw, g.in_w) else {
                            continue;
                        };
                        let src = &src_row[(kh * g.kernel + kw) * c..][..c];
                        let dst = ((b * g.in_h + ih) * g.in_w + iw) * c;
                        for (d, &s) in out[dst..dst + c].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
