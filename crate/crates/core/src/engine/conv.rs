//! im2col / col2im lowering for strided 2-D convolution.
//!
//! Column matrices are laid out `[c*k*k, n*oh*ow]`: row `(c, ki, kj)`,
//! column `(b, oy, ox)`. Convolution is cross-correlation (no kernel flip).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Geometry of a convolution mapping `[n, c, h, w]` to `[n, co, oh, ow]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Geometry of a forward convolution over an `h x w` input.
    pub fn forward(n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::contract("conv2d: stride must be at least 1"));
        }
        if k == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::Dimension {
                op: "conv2d",
                lhs: vec![h + 2 * pad, w + 2 * pad],
                rhs: vec![k, k],
            });
        }
        Ok(ConvGeom {
            n,
            c,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    /// Geometry of the convolution whose adjoint maps an `h x w` map to
    /// `((h-1)*stride - 2*pad + k)` per side; `c` is the adjoint's output channel count.
    pub fn transposed(n: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::contract("deconv2d: stride must be at least 1"));
        }
        let size = |d: usize| (d as i64 - 1) * stride as i64 - 2 * pad as i64 + k as i64;
        let (oh, ow) = (size(h), size(w));
        if oh <= 0 || ow <= 0 {
            return Err(Error::Dimension {
                op: "deconv2d",
                lhs: vec![h, w],
                rhs: vec![k, stride, pad],
            });
        }
        let g = ConvGeom::forward(n, c, oh as usize, ow as usize, k, stride, pad)?;
        debug_assert_eq!((g.oh, g.ow), (h, w));
        Ok(g)
    }

    pub fn col_rows(&self) -> usize {
        self.c * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.n * self.oh * self.ow
    }
}

pub fn im2col<S: Scalar>(x: &[S], g: &ConvGeom) -> Vec<S> {
    let cols_n = g.col_cols();
    let mut cols = vec![S::zero(); g.col_rows() * cols_n];
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.n {
                    let src = &x[(b * g.c + c) * plane..(b * g.c + c + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let base = (b * g.oh + oy) * g.ow;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-adds a column matrix back into an `[n, c, h, w]` buffer.
pub fn col2im<S: Scalar>(cols: &[S], g: &ConvGeom, out: &mut [S]) {
    let cols_n = g.col_cols();
    let plane = g.h * g.w;
    for c in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &cols[row * cols_n..(row + 1) * cols_n];
                for b in 0..g.n {
                    let dst = &mut out[(b * g.c + c) * plane..(b * g.c + c + 1) * plane];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (b * g.oh + oy) * g.ow;
                        let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                        for ox in 0..g.ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[n, c, hw]` to `[c, n*hw]`.
pub fn batch_to_channel_major<S: Scalar>(x: &[S], n: usize, c: usize, hw: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let src = &x[(b * c + ch) * hw..(b * c + ch + 1) * hw];
            out[ch * n * hw + b * hw..ch * n * hw + (b + 1) * hw].copy_from_slice(src);
        }
    }
    out
}

/// `[c, n*hw]` to `[n, c, hw]`.
pub fn channel_to_batch_major<S: Scalar>(x: &[S], n: usize, c: usize, hw: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for ch in 0..c {
        for b in 0..n {
            let src = &x[ch * n * hw + b * hw..ch * n * hw + (b + 1) * hw];
            out[(b * c + ch) * hw..(b * c + ch + 1) * hw].copy_from_slice(src);
        }
    }
    out
}
