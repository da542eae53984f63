//! Shape-manipulating and pointwise kernels used by the tape.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub(crate) fn upsample_nearest2x<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::shape("upsample_nearest2x", "empty spatial extent"));
    }
    let (h2, w2) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * h2 * w2];
    for (p, plane) in x.data().chunks(h * w).enumerate() {
        let dst = &mut out[p * h2 * w2..(p + 1) * h2 * w2];
        for i in 0..h2 {
            let src_row = &plane[(i / 2) * w..(i / 2 + 1) * w];
            for (j, v) in dst[i * w2..(i + 1) * w2].iter_mut().enumerate() {
                *v = src_row[j / 2];
            }
        }
    }
    Ok(Tensor { shape: vec![n, c, h2, w2], data: out })
}

/// Sums each 2x2 block of the upstream gradient into its source pixel.
pub(crate) fn upsample_nearest2x_backward<T: Scalar>(src_shape: &[usize], dy: &[T]) -> Vec<T> {
    let (h, w) = (src_shape[2], src_shape[3]);
    let (h2, w2) = (2 * h, 2 * w);
    let planes = src_shape[0] * src_shape[1];
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let g = &dy[p * h2 * w2..(p + 1) * h2 * w2];
        let d = &mut dx[p * h * w..(p + 1) * h * w];
        for i in 0..h2 {
            for j in 0..w2 {
                d[(i / 2) * w + j / 2] += g[i * w2 + j];
            }
        }
    }
    dx
}

pub(crate) fn concat_channels<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, ca, h, w) = a.dims4()?;
    let (nb, cb, hb, wb) = b.dims4()?;
    if (n, h, w) != (nb, hb, wb) {
        return Err(Error::shape(
            "concat_channels",
            format!("(N,H,W) differ: {:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (sa, sb) = (ca * h * w, cb * h * w);
    let mut out = Vec::with_capacity(n * (sa + sb));
    for s in 0..n {
        out.extend_from_slice(&a.data()[s * sa..(s + 1) * sa]);
        out.extend_from_slice(&b.data()[s * sb..(s + 1) * sb]);
    }
    Ok(Tensor { shape: vec![n, ca + cb, h, w], data: out })
}

pub(crate) fn slice_channels<T: Scalar>(x: &Tensor<T>, start: usize, end: usize) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if start >= end || end > c {
        return Err(Error::shape("slice_channels", format!("channel range {start}..{end} of {c}")));
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * (end - start) * hw);
    for s in 0..n {
        out.extend_from_slice(&x.data()[(s * c + start) * hw..(s * c + end) * hw]);
    }
    Ok(Tensor { shape: vec![n, end - start, h, w], data: out })
}

/// Scatters a channel-slice gradient back into the full-width gradient buffer.
pub(crate) fn slice_channels_backward<T: Scalar>(
    src_shape: &[usize],
    start: usize,
    end: usize,
    dy: &[T],
) -> Vec<T> {
    let (n, c, hw) = (src_shape[0], src_shape[1], src_shape[2] * src_shape[3]);
    let width = (end - start) * hw;
    let mut dx = vec![T::zero(); n * c * hw];
    for s in 0..n {
        dx[(s * c + start) * hw..(s * c + end) * hw].copy_from_slice(&dy[s * width..(s + 1) * width]);
    }
    dx
}

/// `y[n,c,..] = x[n,c,..] * mul[c] + add[c]`.
pub(crate) fn channel_affine<T: Scalar>(x: &Tensor<T>, mul: &[T], add: &[T]) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    if mul.len() != c || add.len() != c {
        return Err(Error::shape(
            "channel_affine",
            format!("{c} channels but {} scales / {} offsets", mul.len(), add.len()),
        ));
    }
    let hw = h * w;
    let mut out = x.data().to_vec();
    for s in 0..n {
        for ch in 0..c {
            for v in &mut out[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                *v = *v * mul[ch] + add[ch];
            }
        }
    }
    Ok(Tensor { shape: x.shape().to_vec(), data: out })
}

pub(crate) fn channel_affine_backward<T: Scalar>(shape: &[usize], mul: &[T], dy: &[T]) -> Vec<T> {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut dx = dy.to_vec();
    for s in 0..n {
        for ch in 0..c {
            for v in &mut dx[(s * c + ch) * hw..(s * c + ch + 1) * hw] {
                *v *= mul[ch];
            }
        }
    }
    dx
}

/// `sign(x) * |x|^e`, with `f(0) = 0`.
#[inline]
pub fn signed_pow_scalar<T: Scalar>(x: T, e: T) -> T {
    if x == T::zero() {
        T::zero()
    } else {
        x.signum() * x.abs().powf(e)
    }
}

pub(crate) fn zip_map<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(Tensor {
        shape: a.shape().to_vec(),
        data: a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    })
}
