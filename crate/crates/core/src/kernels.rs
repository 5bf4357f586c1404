//! Raw computation kernels behind the tape operations.
//!
//! Broadcasting follows the usual right-aligned rule: trailing axes are
//! matched, and an extent of 1 repeats along that axis.

use crate::dtype::Element;
use crate::tensor::{numel_of, Tensor};

pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i < a.len() { a[a.len() - 1 - i] } else { 1 };
        let db = if i < b.len() { b[b.len() - 1 - i] } else { 1 };
        let d = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
        out[rank - 1 - i] = d;
    }
    Some(out)
}

/// Strides of `shape` aligned to `out_shape`, 0 on broadcast axes.
fn aligned_strides(shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1usize;
    for i in 0..shape.len() {
        let axis = shape.len() - 1 - i;
        if shape[axis] != 1 {
            strides[rank - 1 - (i)] = s;
        }
        s *= shape[axis];
    }
    strides
}

/// Elementwise binary op with broadcasting.
pub fn binop<E: Element>(
    a: &Tensor<E>,
    b: &Tensor<E>,
    out_shape: &[usize],
    f: impl Fn(E, E) -> E,
) -> Tensor<E> {
    let ad = a.data();
    let bd = b.data();
    // Fast paths cover almost all traffic: equal shapes, scalars, a trailing
    // block that tiles, or a per-row scalar.
    if a.shape() == b.shape() {
        let data = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(out_shape, data).unwrap();
    }
    if b.numel() == 1 {
        let y = bd[0];
        let data = ad.iter().map(|&x| f(x, y)).collect();
        return Tensor::from_vec(out_shape, data).unwrap();
    }
    if a.numel() == 1 {
        let x = ad[0];
        let data = bd.iter().map(|&y| f(x, y)).collect();
        return Tensor::from_vec(out_shape, data).unwrap();
    }
    let n = numel_of(out_shape);
    if a.shape() == out_shape && n % bd.len() == 0 && is_suffix_of(b.shape(), out_shape) {
        // b tiles along leading axes, e.g. [N,D] op [D].
        let m = bd.len();
        let mut data = Vec::with_capacity(n);
        for chunk in ad.chunks_exact(m) {
            data.extend(chunk.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
        return Tensor::from_vec(out_shape, data).unwrap();
    }
    if a.shape() == out_shape && broadcasts_trailing_only(b.shape(), out_shape) {
        // b repeats over a contiguous trailing block, e.g. [N,D] op [N,1].
        let block = n / bd.len();
        let mut data = Vec::with_capacity(n);
        for (i, &y) in bd.iter().enumerate() {
            data.extend(ad[i * block..(i + 1) * block].iter().map(|&x| f(x, y)));
        }
        return Tensor::from_vec(out_shape, data).unwrap();
    }

    // General strided walk.
    let rank = out_shape.len();
    let sa = aligned_strides(a.shape(), out_shape);
    let sb = aligned_strides(b.shape(), out_shape);
    let mut idx = vec![0usize; rank];
    let mut ia = 0usize;
    let mut ib = 0usize;
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f(ad[ia], bd[ib]));
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            ia += sa[axis];
            ib += sb[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            ia -= sa[axis] * out_shape[axis];
            ib -= sb[axis] * out_shape[axis];
        }
    }
    Tensor::from_vec(out_shape, data).unwrap()
}

/// True when `shape`, right-aligned against `out`, matches its trailing axes
/// exactly (leading axes absent).
fn is_suffix_of(shape: &[usize], out: &[usize]) -> bool {
    if shape.len() > out.len() {
        return false;
    }
    let lead = out.len() - shape.len();
    shape.iter().enumerate().all(|(i, &d)| d == out[lead + i])
}

/// True when `shape` matches `out` on leading axes and is 1 past the first
/// broadcast axis (e.g. [N,1] against [N,D]).
fn broadcasts_trailing_only(shape: &[usize], out: &[usize]) -> bool {
    if shape.len() != out.len() {
        return false;
    }
    let mut seen_broadcast = false;
    for (&s, &o) in shape.iter().zip(out) {
        if s == o && !seen_broadcast {
            continue;
        }
        if s == 1 {
            seen_broadcast = true;
            continue;
        }
        return false;
    }
    true
}

/// Sum-reduce `x` down to `to_shape` (right-aligned; every reduced axis has
/// extent 1 in the target or is absent).
pub fn reduce_sum_to<E: Element>(x: &Tensor<E>, to_shape: &[usize]) -> Tensor<E> {
    if x.shape() == to_shape {
        return x.clone();
    }
    let n_out = numel_of(to_shape);
    if n_out == 1 {
        let mut acc = E::zero();
        for &v in x.data() {
            acc = acc + v;
        }
        let data = vec![acc];
        return Tensor::from_vec(to_shape, data).unwrap();
    }
    let from = x.shape();
    let rank = from.len();
    let strides_out = aligned_strides(to_shape, from);
    let mut out = vec![E::zero(); n_out];
    let xd = x.data();
    let mut idx = vec![0usize; rank];
    let mut io = 0usize;
    for &v in xd {
        out[io] = out[io] + v;
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            io += strides_out[axis];
            if idx[axis] < from[axis] {
                break;
            }
            idx[axis] = 0;
            io -= strides_out[axis] * from[axis];
        }
    }
    Tensor::from_vec(to_shape, out).unwrap()
}

/// Broadcast `x` up to `to_shape`.
pub fn expand<E: Element>(x: &Tensor<E>, to_shape: &[usize]) -> Tensor<E> {
    if x.shape() == to_shape {
        return x.clone();
    }
    binop(
        x,
        &Tensor::zeros(to_shape),
        to_shape,
        |a, _| a,
    )
}

pub fn permute<E: Element>(x: &Tensor<E>, perm: &[usize]) -> Tensor<E> {
    let from = x.shape();
    let rank = from.len();
    debug_assert_eq!(perm.len(), rank);
    let out_shape: Vec<usize> = perm.iter().map(|&p| from[p]).collect();
    let mut in_strides = vec![0usize; rank];
    let mut s = 1;
    for axis in (0..rank).rev() {
        in_strides[axis] = s;
        s *= from[axis];
    }
    let walk_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let xd = x.data();
    let mut data = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut ii = 0usize;
    for _ in 0..n {
        data.push(xd[ii]);
        for axis in (0..rank).rev() {
            idx[axis] += 1;
            ii += walk_strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            idx[axis] = 0;
            ii -= walk_strides[axis] * out_shape[axis];
        }
    }
    Tensor::from_vec(&out_shape, data).unwrap()
}

pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// View a shape as [outer, axis extent, inner] around `axis`.
fn around_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn concat<E: Element>(parts: &[&Tensor<E>], axis: usize) -> Tensor<E> {
    debug_assert!(!parts.is_empty());
    let mut out_shape = parts[0].shape().to_vec();
    out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = around_axis(&out_shape, axis);
    let mut data = Vec::with_capacity(numel_of(&out_shape));
    for o in 0..outer {
        for p in parts {
            let ext = p.shape()[axis];
            let start = o * ext * inner;
            data.extend_from_slice(&p.data()[start..start + ext * inner]);
        }
    }
    Tensor::from_vec(&out_shape, data).unwrap()
}

pub fn slice_axis<E: Element>(x: &Tensor<E>, axis: usize, start: usize, len: usize) -> Tensor<E> {
    let (outer, ext, inner) = around_axis(x.shape(), axis);
    debug_assert!(start + len <= ext);
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    let xd = x.data();
    for o in 0..outer {
        let base = (o * ext + start) * inner;
        data.extend_from_slice(&xd[base..base + len * inner]);
    }
    Tensor::from_vec(&out_shape, data).unwrap()
}

pub fn zero_pad_axis<E: Element>(
    x: &Tensor<E>,
    axis: usize,
    before: usize,
    after: usize,
) -> Tensor<E> {
    let (outer, ext, inner) = around_axis(x.shape(), axis);
    let mut out_shape = x.shape().to_vec();
    out_shape[axis] = before + ext + after;
    let mut data = vec![E::zero(); numel_of(&out_shape)];
    let xd = x.data();
    let new_ext = out_shape[axis];
    for o in 0..outer {
        let src = o * ext * inner;
        let dst = (o * new_ext + before) * inner;
        data[dst..dst + ext * inner].copy_from_slice(&xd[src..src + ext * inner]);
    }
    Tensor::from_vec(&out_shape, data).unwrap()
}

pub fn matmul<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> Tensor<E> {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = b.shape()[1];
    debug_assert_eq!(b.shape()[0], k, "matmul inner dimensions");
    let mut c = vec![E::zero(); m * n];
    E::gemm(m, k, n, a.data(), b.data(), &mut c);
    Tensor::from_vec(&[m, n], c).unwrap()
}

/// Geometry of a 2-D convolution lowered to matrix multiplication.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel_h) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel_w) / self.stride + 1
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.channels, self.height, self.width]
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }
}

/// Unfold `[N,C,H,W]` into patch rows `[N*OH*OW, C*KH*KW]` (zero padding).
pub fn im2col<E: Element>(x: &Tensor<E>, spec: &ConvSpec) -> Tensor<E> {
    let (oh, ow) = (spec.out_height(), spec.out_width());
    let xd = x.data();
    let mut data = vec![E::zero(); spec.rows() * spec.patch_len()];
    let mut row = 0usize;
    for n in 0..spec.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = row * spec.patch_len();
                let mut col = 0usize;
                for c in 0..spec.channels {
                    let plane = (n * spec.channels + c) * spec.height * spec.width;
                    for ky in 0..spec.kernel_h {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        for kx in 0..spec.kernel_w {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if iy >= 0
                                && iy < spec.height as isize
                                && ix >= 0
                                && ix < spec.width as isize
                            {
                                data[base + col] =
                                    xd[plane + iy as usize * spec.width + ix as usize];
                            }
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::from_vec(&[spec.rows(), spec.patch_len()], data).unwrap()
}

/// Adjoint of [`im2col`]: scatter-add patch rows back into `[N,C,H,W]`.
pub fn col2im<E: Element>(cols: &Tensor<E>, spec: &ConvSpec) -> Tensor<E> {
    let (oh, ow) = (spec.out_height(), spec.out_width());
    let cd = cols.data();
    let mut data = vec![E::zero(); spec.batch * spec.channels * spec.height * spec.width];
    let mut row = 0usize;
    for n in 0..spec.batch {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = row * spec.patch_len();
                let mut col = 0usize;
                for c in 0..spec.channels {
                    let plane = (n * spec.channels + c) * spec.height * spec.width;
                    for ky in 0..spec.kernel_h {
                        let iy = (oy * spec.stride + ky) as isize - spec.pad as isize;
                        for kx in 0..spec.kernel_w {
                            let ix = (ox * spec.stride + kx) as isize - spec.pad as isize;
                            if iy >= 0
                                && iy < spec.height as isize
                                && ix >= 0
                                && ix < spec.width as isize
                            {
                                let at = plane + iy as usize * spec.width + ix as usize;
                                data[at] = data[at] + cd[base + col];
                            }
                            col += 1;
                        }
                    }
                }
                row += 1;
            }
        }
    }
    Tensor::from_vec(&spec.input_shape(), data).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor<f64> {
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1], &[2, 3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[], &[4]), Some(vec![4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn binop_row_and_col_broadcast() {
        let a = t(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let row = t(&[3], vec![10., 20., 30.]);
        let sum = binop(&a, &row, &[2, 3], |x, y| x + y);
        assert_eq!(sum.data(), &[11., 22., 33., 14., 25., 36.]);

        let col = t(&[2, 1], vec![100., 200.]);
        let sum = binop(&a, &col, &[2, 3], |x, y| x + y);
        assert_eq!(sum.data(), &[101., 102., 103., 204., 205., 206.]);
    }

    #[test]
    fn general_walker_matches_fast_path() {
        let a = t(&[2, 2, 2], (0..8).map(|v| v as f64).collect());
        let b = t(&[2, 1, 2], vec![1., 2., 3., 4.]);
        let got = binop(&a, &b, &[2, 2, 2], |x, y| x * y);
        // b broadcasts along the middle axis.
        assert_eq!(got.data(), &[0., 2., 2., 6., 12., 20., 18., 28.]);
    }

    #[test]
    fn reduce_sum_to_axes() {
        let a = t(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        assert_eq!(reduce_sum_to(&a, &[1, 3]).data(), &[5., 7., 9.]);
        assert_eq!(reduce_sum_to(&a, &[2, 1]).data(), &[6., 15.]);
        assert_eq!(reduce_sum_to(&a, &[]).data(), &[21.]);
    }

    #[test]
    fn expand_then_reduce_roundtrip() {
        let a = t(&[2, 1], vec![3., 4.]);
        let e = expand(&a, &[2, 5]);
        assert_eq!(e.shape(), &[2, 5]);
        let r = reduce_sum_to(&e, &[2, 1]);
        assert_eq!(r.data(), &[15., 20.]);
    }

    #[test]
    fn permute_transpose() {
        let a = t(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let p = permute(&a, &[1, 0]);
        assert_eq!(p.shape(), &[3, 2]);
        assert_eq!(p.data(), &[1., 4., 2., 5., 3., 6.]);
    }

    #[test]
    fn concat_slice_pad_roundtrip() {
        let a = t(&[2, 2], vec![1., 2., 3., 4.]);
        let b = t(&[2, 1], vec![9., 8.]);
        let c = concat(&[&a, &b], 1);
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1., 2., 9., 3., 4., 8.]);
        let back = slice_axis(&c, 1, 0, 2);
        assert_eq!(back.data(), a.data());
        let padded = zero_pad_axis(&back, 1, 1, 0);
        assert_eq!(padded.data(), &[0., 1., 2., 0., 3., 4.]);
    }

    #[test]
    fn matmul_small() {
        let a = t(&[2, 3], vec![1., 2., 3., 4., 5., 6.]);
        let b = t(&[3, 2], vec![7., 8., 9., 10., 11., 12.]);
        let c = matmul(&a, &b);
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn im2col_identity_kernel() {
        // 1x1 kernel, stride 1: rows are just a channel-major re-layout.
        let x = t(&[1, 2, 2, 2], (1..=8).map(|v| v as f64).collect());
        let spec = ConvSpec {
            batch: 1,
            channels: 2,
            height: 2,
            width: 2,
            kernel_h: 1,
            kernel_w: 1,
            stride: 1,
            pad: 0,
        };
        let cols = im2col(&x, &spec);
        assert_eq!(cols.shape(), &[4, 2]);
        assert_eq!(cols.data(), &[1., 5., 2., 6., 3., 7., 4., 8.]);
        // col2im is the exact adjoint here (no overlap): roundtrip restores x.
        let back = col2im(&cols, &spec);
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn im2col_padding_and_stride() {
        let x = t(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let spec = ConvSpec {
            batch: 1,
            channels: 1,
            height: 3,
            width: 3,
            kernel_h: 3,
            kernel_w: 3,
            stride: 2,
            pad: 1,
        };
        assert_eq!(spec.out_height(), 2);
        let cols = im2col(&x, &spec);
        assert_eq!(cols.shape(), &[4, 9]);
        // Top-left patch sees zero padding on its first row and column.
        assert_eq!(&cols.data()[0..9], &[0., 0., 0., 0., 1., 2., 0., 4., 5.]);
    }
}
