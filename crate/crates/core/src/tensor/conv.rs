//! 2-D cross-correlation via im2col and a dense matrix product.

use std::cell::Cell;

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

thread_local! {
    static PERTURB_BACKWARD: Cell<bool> = const { Cell::new(false) };
}

/// Test hook: while enabled on the current thread, the conv weight gradient
/// is deliberately scaled by 1.1 so that gradient checks must fail.
#[doc(hidden)]
pub fn set_conv_backward_perturbation(enabled: bool) {
    PERTURB_BACKWARD.with(|p| p.set(enabled));
}

fn perturbed() -> bool {
    PERTURB_BACKWARD.with(|p| p.get())
}

/// Output extent `floor((size + 2 pad - kernel) / stride) + 1`, or `None` when
/// the kernel does not fit.
pub fn conv2d_output_size(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = size + 2 * pad;
    (padded >= kernel && stride > 0).then(|| (padded - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    pub fn new<T: Scalar>(
        input: &Tensor<T>,
        weight: &Tensor<T>,
        bias: &Tensor<T>,
        stride: usize,
        pad: usize,
    ) -> Result<Self> {
        const OP: &str = "conv2d";
        if stride != 1 && stride != 2 {
            return Err(Error::Unsupported { op: OP, detail: format!("stride {stride} (only 1 and 2)") });
        }
        let (n, cin, h, w) = input.dims4()?;
        let (cout, wcin, kh, kw) = weight
            .dims4()
            .map_err(|_| Error::shape(OP, format!("weight must be (Cout,Cin,Kh,Kw), got {:?}", weight.shape())))?;
        if wcin != cin {
            return Err(Error::shape(OP, format!("input has {cin} channels but weight expects {wcin}")));
        }
        if bias.shape() != [cout] {
            return Err(Error::shape(OP, format!("bias shape {:?}, expected [{cout}]", bias.shape())));
        }
        let ho = conv2d_output_size(h, kh, stride, pad);
        let wo = conv2d_output_size(w, kw, stride, pad);
        match (ho, wo) {
            (Some(ho), Some(wo)) if ho >= 1 && wo >= 1 => {
                Ok(ConvGeometry { n, cin, h, w, cout, kh, kw, stride, pad, ho, wo })
            }
            _ => Err(Error::shape(
                OP,
                format!("kernel {kh}x{kw} with padding {pad} does not fit input {h}x{w}"),
            )),
        }
    }

    fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_pixels(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds one sample (`cin x h x w`) into a `(cin*kh*kw) x (ho*wo)` matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, x: &[T], cols: &mut [T]) {
    let op = g.out_pixels();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * op..(row + 1) * op];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oi * g.wo..(oi + 1) * g.wo];
                    if ii < 0 || ii >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for (oj, v) in line.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *v = if jj < 0 || jj >= g.w as isize { T::zero() } else { src[jj as usize] };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into a sample.
fn col2im<T: Scalar>(g: &ConvGeometry, cols: &[T], dx: &mut [T]) {
    let op = g.out_pixels();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * op..(row + 1) * op];
                for oi in 0..g.ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * g.w..(ii as usize + 1) * g.w];
                    for oj in 0..g.wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.w as isize {
                            dst[jj as usize] += src[oi * g.wo + oj];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Tensor<T> {
    let (pl, op) = (g.patch_len(), g.out_pixels());
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * op;
    let mut out = vec![T::zero(); g.n * out_stride];
    let mut cols = vec![T::zero(); pl * op];
    for s in 0..g.n {
        im2col(g, &input.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
        let y = &mut out[s * out_stride..(s + 1) * out_stride];
        for (co, plane) in y.chunks_mut(op).enumerate() {
            plane.iter_mut().for_each(|v| *v = bias.data()[co]);
        }
        T::gemm(g.cout, pl, op, weight.data(), false, &cols, false, y, true);
    }
    Tensor { shape: vec![g.n, g.cout, g.ho, g.wo], data: out }
}

/// Gradients `(d_input, d_weight, d_bias)`; each is computed only when requested.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    need: [bool; 3],
) -> (Option<Vec<T>>, Option<Vec<T>>, Option<Vec<T>>) {
    let (pl, op) = (g.patch_len(), g.out_pixels());
    let in_stride = g.cin * g.h * g.w;
    let out_stride = g.cout * op;
    let mut dx = need[0].then(|| vec![T::zero(); g.n * in_stride]);
    let mut dw = need[1].then(|| vec![T::zero(); g.cout * pl]);
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); g.cout];
        for s in 0..g.n {
            let dy = &grad_out[s * out_stride..(s + 1) * out_stride];
            for (co, plane) in dy.chunks(op).enumerate() {
                db[co] += plane.iter().copied().sum::<T>();
            }
        }
        db
    });
    if dx.is_none() && dw.is_none() {
        return (None, None, db);
    }
    let mut cols = vec![T::zero(); pl * op];
    for s in 0..g.n {
        let dy = &grad_out[s * out_stride..(s + 1) * out_stride];
        if let Some(dw) = dw.as_mut() {
            im2col(g, &input.data()[s * in_stride..(s + 1) * in_stride], &mut cols);
            // dW += dY (cout x op) . cols^T (op x pl)
            T::gemm(g.cout, op, pl, dy, false, &cols, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols = W^T (pl x cout) . dY (cout x op)
            T::gemm(pl, g.cout, op, weight.data(), true, dy, false, &mut cols, false);
            col2im(g, &cols, &mut dx[s * in_stride..(s + 1) * in_stride]);
        }
    }
    if perturbed() {
        if let Some(dw) = dw.as_mut() {
            let f = T::lit(1.1);
            dw.iter_mut().for_each(|v| *v *= f);
        }
    }
    (dx, dw, db)
}
