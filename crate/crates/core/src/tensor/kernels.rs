//! Raw loops behind the tensor operations. Everything here works on
//! contiguous row-major `f64` buffers.

use serde::{Deserialize, Serialize};

pub(crate) fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for ax in (0..shape.len().saturating_sub(1)).rev() {
        strides[ax] = strides[ax + 1] * shape[ax + 1];
    }
    strides
}

/// Reads `src` through arbitrary (possibly zero) strides laid over `out_shape`.
pub(crate) fn gather_strided(src: &[f64], out_shape: &[usize], src_strides: &[usize]) -> Vec<f64> {
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return out;
    }
    let rank = out_shape.len();
    if rank == 0 {
        out.push(src[0]);
        return out;
    }
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = src_strides[last];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    loop {
        if inner_stride == 1 {
            out.extend_from_slice(&src[off..off + inner]);
        } else {
            for j in 0..inner {
                out.push(src[off + j * inner_stride]);
            }
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            off += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums `src` (shaped `in_shape`) into a buffer of `out_len` elements where
/// `dst_strides` maps every input axis onto the output (0 on reduced axes).
pub(crate) fn reduce_strided(
    src: &[f64],
    in_shape: &[usize],
    dst_strides: &[usize],
    out_len: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; out_len];
    if src.is_empty() {
        return out;
    }
    let rank = in_shape.len();
    if rank == 0 {
        out[0] = src[0];
        return out;
    }
    let last = rank - 1;
    let inner = in_shape[last];
    let inner_stride = dst_strides[last];
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    let mut pos = 0usize;
    loop {
        if inner_stride == 0 {
            let s: f64 = src[pos..pos + inner].iter().sum();
            out[off] += s;
        } else {
            for j in 0..inner {
                out[off + j * inner_stride] += src[pos + j];
            }
        }
        pos += inner;
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            off += dst_strides[ax];
            if idx[ax] < in_shape[ax] {
                break;
            }
            off -= dst_strides[ax] * in_shape[ax];
            idx[ax] = 0;
        }
    }
}

/// `c[b] = a[b] @ b[b]` for `batch` row-major matrices.
/// Batched `op(a) · op(b)` where `op` optionally transposes the last two axes.
/// `a` holds `[batch, m, k]` (or `[batch, k, m]` when `ta`), `b` holds
/// `[batch, k, n]` (or `[batch, n, k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn batched_matmul(
    a: &[f64],
    b: &[f64],
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    ta: bool,
    tb: bool,
) -> Vec<f64> {
    let mut c = vec![0.0; batch * m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    for i in 0..batch {
        let a_blk = &a[i * m * k..(i + 1) * m * k];
        let b_blk = &b[i * k * n..(i + 1) * k * n];
        let c_blk = &mut c[i * m * n..(i + 1) * m * n];
        // SAFETY: each block holds exactly m*k, k*n and m*n values and the
        // strides address them in row-major or transposed order.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a_blk.as_ptr(),
                rsa,
                csa,
                b_blk.as_ptr(),
                rsb,
                csb,
                0.0,
                c_blk.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
    c
}

/// Geometry of a square-kernel 2-D convolution over `[batch, channels, height, width]` input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(image_offset, column_offset, len, image_stride)` for every run of
    /// in-bounds taps that are consecutive in the column layout
    /// `[patch_len, batch * out_positions]`.
    fn for_each_run(&self, batch: usize, mut f: impl FnMut(usize, usize, usize, usize)) {
        let (oh, ow) = (self.out_height(), self.out_width());
        let positions = oh * ow;
        let total = batch * positions;
        let (k, s, p) = (self.kernel, self.stride, self.padding as isize);
        let img = self.channels * self.height * self.width;
        for c in 0..self.channels {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    // ox range with 0 <= ox*s + kx - p < width
                    let lo = (p - kx as isize).max(0) as usize;
                    let ox0 = lo.div_ceil(s);
                    let hi = self.width as isize + p - kx as isize;
                    let ox1 = if hi <= 0 { 0 } else { ((hi as usize - 1) / s + 1).min(ow) };
                    if ox0 >= ox1 {
                        continue;
                    }
                    for b in 0..batch {
                        for oy in 0..oh {
                            let iy = (oy * s + ky) as isize - p;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            let ix0 = (ox0 * s + kx) as isize - p;
                            let src = b * img + (c * self.height + iy as usize) * self.width + ix0 as usize;
                            let dst = row * total + b * positions + oy * ow + ox0;
                            f(src, dst, ox1 - ox0, s);
                        }
                    }
                }
            }
        }
    }
}

/// `[batch, C, H, W]` to patch columns `[C*k*k, batch*Ho*Wo]`.
pub(crate) fn im2col(src: &[f64], batch: usize, geom: &ConvGeometry) -> Vec<f64> {
    let cols = geom.patch_len() * batch * geom.out_height() * geom.out_width();
    let mut out = vec![0.0; cols];
    geom.for_each_run(batch, |si, di, len, stride| {
        if stride == 1 {
            out[di..di + len].copy_from_slice(&src[si..si + len]);
        } else {
            for j in 0..len {
                out[di + j] = src[si + j * stride];
            }
        }
    });
    out
}

/// Adjoint of [`im2col`]: accumulates patch columns back onto the images.
pub(crate) fn col2im(src: &[f64], batch: usize, geom: &ConvGeometry) -> Vec<f64> {
    let mut out = vec![0.0; batch * geom.channels * geom.height * geom.width];
    geom.for_each_run(batch, |ii, ci, len, stride| {
        for j in 0..len {
            out[ii + j * stride] += src[ci + j];
        }
    });
    out
}

/// Splits a shape around `axis` into (outer, axis length, inner) block sizes.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gather_transposes() {
        let src = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        // [2,3] read as its transpose [3,2]
        let out = gather_strided(&src, &[3, 2], &[1, 3]);
        assert_eq!(out, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[test]
    fn reduce_sums_columns() {
        let src = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let out = reduce_strided(&src, &[2, 3], &[0, 1], 3);
        assert_eq!(out, vec![5.0, 7.0, 9.0]);
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        let geom = ConvGeometry { channels: 2, height: 5, width: 4, kernel: 3, stride: 2, padding: 1 };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let cols_len = geom.patch_len() * geom.out_height() * geom.out_width();
        let y: Vec<f64> = (0..cols_len).map(|i| (i as f64 * 0.11).cos()).collect();
        let ax = im2col(&x, 1, &geom);
        let aty = col2im(&y, 1, &geom);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }
}
