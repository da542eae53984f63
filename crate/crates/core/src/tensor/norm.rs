//! Per-channel batch normalization kernels.

use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; nothing is updated.
    Eval,
}

/// Running mean/variance carried between batches.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState<T> {
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
    pub momentum: T,
    pub epsilon: T,
}

impl<T: Scalar> BatchNormState<T> {
    pub fn new(channels: usize, momentum: T, epsilon: T) -> Self {
        BatchNormState {
            running_mean: vec![T::zero(); channels],
            running_var: vec![T::one(); channels],
            momentum,
            epsilon,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

/// Saved forward quantities needed by the backward rule.
pub(crate) struct NormSaved<T> {
    pub xhat: Vec<T>,
    pub inv_std: Vec<T>,
    pub train: bool,
}

pub(crate) fn batchnorm_forward<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    state: &mut BatchNormState<T>,
    mode: NormMode,
) -> Result<(Tensor<T>, NormSaved<T>)> {
    const OP: &str = "batchnorm2d";
    let (n, c, h, w) = input.dims4()?;
    if scale.shape() != [c] || shift.shape() != [c] || state.channels() != c {
        return Err(Error::shape(
            OP,
            format!(
                "input has {c} channels; scale {:?}, shift {:?}, running stats {}",
                scale.shape(),
                shift.shape(),
                state.channels()
            ),
        ));
    }
    if !(state.epsilon > T::zero()) {
        return Err(Error::Domain { op: OP, detail: "epsilon must be positive".into() });
    }
    let hw = h * w;
    let count = n * hw;
    if mode == NormMode::Train && count < 2 {
        return Err(Error::DegenerateStatistics {
            op: OP,
            detail: format!("train mode needs batch*H*W >= 2, got {count}"),
        });
    }
    let x = input.data();
    let mut xhat = vec![T::zero(); x.len()];
    let mut inv_std = vec![T::zero(); c];
    let mut out = vec![T::zero(); x.len()];
    let countf = T::lit(count as f64);
    for ch in 0..c {
        let plane_iter = || (0..n).flat_map(move |s| (s * c + ch) * hw..(s * c + ch + 1) * hw);
        let (mean, var) = match mode {
            NormMode::Train => {
                let mean = plane_iter().map(|i| x[i]).sum::<T>() / countf;
                let var = plane_iter().map(|i| (x[i] - mean) * (x[i] - mean)).sum::<T>() / countf;
                let unbiased = var * countf / T::lit((count - 1) as f64);
                let m = state.momentum;
                state.running_mean[ch] = (T::one() - m) * state.running_mean[ch] + m * mean;
                state.running_var[ch] = (T::one() - m) * state.running_var[ch] + m * unbiased;
                (mean, var)
            }
            NormMode::Eval => (state.running_mean[ch], state.running_var[ch]),
        };
        let is = T::one() / (var + state.epsilon).sqrt();
        inv_std[ch] = is;
        let (g, b) = (scale.data()[ch], shift.data()[ch]);
        for i in plane_iter() {
            let xh = (x[i] - mean) * is;
            xhat[i] = xh;
            out[i] = g * xh + b;
        }
    }
    let saved = NormSaved { xhat, inv_std, train: mode == NormMode::Train };
    Ok((Tensor { shape: input.shape().to_vec(), data: out }, saved))
}

/// Returns `(d_input, d_scale, d_shift)`. In train mode the input gradient
/// includes the paths through the batch mean and variance.
pub(crate) fn batchnorm_backward<T: Scalar>(
    shape: &[usize],
    scale: &Tensor<T>,
    saved: &NormSaved<T>,
    dy: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (n, c, hw) = (shape[0], shape[1], shape[2] * shape[3]);
    let countf = T::lit((n * hw) as f64);
    let mut dx = vec![T::zero(); dy.len()];
    let mut dscale = vec![T::zero(); c];
    let mut dshift = vec![T::zero(); c];
    for ch in 0..c {
        let idx = || (0..n).flat_map(move |s| (s * c + ch) * hw..(s * c + ch + 1) * hw);
        let sum_dy: T = idx().map(|i| dy[i]).sum();
        let sum_dy_xhat: T = idx().map(|i| dy[i] * saved.xhat[i]).sum();
        dscale[ch] = sum_dy_xhat;
        dshift[ch] = sum_dy;
        let g = scale.data()[ch];
        let is = saved.inv_std[ch];
        if saved.train {
            let mean_dy = sum_dy / countf;
            let mean_dy_xhat = sum_dy_xhat / countf;
            for i in idx() {
                dx[i] = g * is * (dy[i] - mean_dy - saved.xhat[i] * mean_dy_xhat);
            }
        } else {
            for i in idx() {
                dx[i] = g * is * dy[i];
            }
        }
    }
    (dx, dscale, dshift)
}
