//! Linear normalization and signed gamma correction.
//!
//! Gamma correction maps `x -> sign(x) * |x|^(1/gamma)`: compressive for
//! `gamma > 1`, expansive for `gamma < 1`, the identity at `gamma = 1`. In
//! learnable mode gamma is parameterized as `exp(theta)` so it stays positive
//! under unconstrained optimization.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GammaMode {
    None,
    Fixed,
    Learnable,
}

impl fmt::Display for GammaMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GammaMode::None => "none",
            GammaMode::Fixed => "fixed",
            GammaMode::Learnable => "learnable",
        })
    }
}

impl FromStr for GammaMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(GammaMode::None),
            "fixed" => Ok(GammaMode::Fixed),
            "learnable" => Ok(GammaMode::Learnable),
            other => Err(Error::Config(format!("unknown gamma mode `{other}` (none|fixed|learnable)"))),
        }
    }
}

/// Signed power-law transform applied to a subset of channels.
#[derive(Clone, Debug, PartialEq)]
pub struct GammaTransform<T> {
    mode: GammaMode,
    gamma: T,
    theta: T,
    applies_to: Vec<usize>,
}

impl<T: Scalar> GammaTransform<T> {
    pub fn identity(applies_to: Vec<usize>) -> Self {
        GammaTransform { mode: GammaMode::None, gamma: T::one(), theta: T::zero(), applies_to }
    }

    pub fn fixed(gamma: T, applies_to: Vec<usize>) -> Result<Self> {
        if !(gamma > T::zero()) || !gamma.is_finite() {
            return Err(Error::Config(format!("gamma must be positive and finite, got {gamma}")));
        }
        Ok(GammaTransform { mode: GammaMode::Fixed, gamma, theta: gamma.ln(), applies_to })
    }

    /// Learnable transform starting from `gamma0` (`theta = ln gamma0`).
    pub fn learnable(gamma0: T, applies_to: Vec<usize>) -> Result<Self> {
        let mut t = Self::fixed(gamma0, applies_to)?;
        t.mode = GammaMode::Learnable;
        Ok(t)
    }

    pub fn mode(&self) -> GammaMode {
        self.mode
    }

    pub fn applies_to(&self) -> &[usize] {
        &self.applies_to
    }

    pub fn gamma(&self) -> T {
        match self.mode {
            GammaMode::None => T::one(),
            GammaMode::Fixed => self.gamma,
            GammaMode::Learnable => self.theta.exp(),
        }
    }

    /// Unconstrained parameter; only meaningful in learnable mode.
    pub fn theta(&self) -> T {
        self.theta
    }

    pub fn set_theta(&mut self, theta: T) {
        self.theta = theta;
    }

    /// Rebuilds a transform from its stored fields.
    pub(crate) fn from_parts(mode: GammaMode, gamma: T, theta: T, applies_to: Vec<usize>) -> Self {
        GammaTransform { mode, gamma, theta, applies_to }
    }

    pub(crate) fn raw_gamma(&self) -> T {
        self.gamma
    }

    pub fn is_learnable(&self) -> bool {
        self.mode == GammaMode::Learnable
    }

    fn exponent(&self) -> T {
        match self.mode {
            GammaMode::None => T::one(),
            GammaMode::Fixed => T::one() / self.gamma,
            GammaMode::Learnable => (-self.theta).exp(),
        }
    }

    fn transformed_channels(&self, x: &Tensor<T>) -> Vec<bool> {
        if x.rank() == 4 {
            let c = x.shape()[1];
            (0..c).map(|ch| self.applies_to.contains(&ch)).collect()
        } else {
            vec![true]
        }
    }

    fn map_channels(&self, x: &Tensor<T>, f: impl Fn(T) -> T) -> Tensor<T> {
        if self.mode == GammaMode::None {
            return x.clone();
        }
        let mask = self.transformed_channels(x);
        let mut out = x.clone();
        if x.rank() != 4 {
            out.data_mut().iter_mut().for_each(|v| *v = f(*v));
            return out;
        }
        let (c, hw) = (x.shape()[1], x.shape()[2] * x.shape()[3]);
        for (p, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            if mask[p % c] {
                plane.iter_mut().for_each(|v| *v = f(*v));
            }
        }
        out
    }

    /// `sign(x) * |x|^(1/gamma)` on the configured channels of an NCHW tensor
    /// (every element for other ranks).
    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let e = self.exponent();
        self.map_channels(x, |v| crate::tensor::signed_pow_scalar(v, e))
    }

    /// `sign(y) * |y|^gamma`, the exact inverse of [`GammaTransform::forward`].
    pub fn inverse(&self, y: &Tensor<T>) -> Tensor<T> {
        let g = self.gamma();
        self.map_channels(y, |v| crate::tensor::signed_pow_scalar(v, g))
    }

    /// Records the transform on `tape`. In learnable mode `theta` must be the
    /// tape leaf holding `theta` so gradients reach it.
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, x: Var, theta: Option<Var>) -> Result<Var> {
        let exponent = match (self.mode, theta) {
            (GammaMode::None, _) => return Ok(x),
            (GammaMode::Learnable, Some(th)) => {
                let neg = tape.scalar_mul(th, -T::one());
                tape.exp(neg)
            }
            (GammaMode::Learnable, None) => {
                return Err(Error::Config("learnable gamma needs its theta leaf on the tape".into()))
            }
            (GammaMode::Fixed, _) => tape.constant(Tensor::scalar(self.exponent())),
        };
        let mask = self.transformed_channels(tape.value(x));
        if tape.value(x).rank() != 4 {
            return tape.signed_pow(x, exponent);
        }
        if mask.iter().all(|&m| m) {
            return tape.signed_pow(x, exponent);
        }
        if !mask.iter().any(|&m| m) {
            return Ok(x);
        }
        // transform contiguous runs of selected channels, pass the rest through
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < mask.len() {
            let mut end = start + 1;
            while end < mask.len() && mask[end] == mask[start] {
                end += 1;
            }
            let part = tape.slice_channels(x, start, end)?;
            pieces.push(if mask[start] { tape.signed_pow(part, exponent)? } else { part });
            start = end;
        }
        let mut acc = pieces[0];
        for p in &pieces[1..] {
            acc = tape.concat_channels(acc, *p)?;
        }
        Ok(acc)
    }
}

/// Per-channel `(x - mean) / std`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearNormalizer<T> {
    mean: Vec<T>,
    std: Vec<T>,
}

impl<T: Scalar> LinearNormalizer<T> {
    pub fn new(mean: Vec<T>, std: Vec<T>) -> Result<Self> {
        if mean.len() != std.len() || mean.is_empty() {
            return Err(Error::Config(format!("{} means but {} deviations", mean.len(), std.len())));
        }
        if let Some((i, s)) = std.iter().enumerate().find(|(_, s)| !(**s > T::zero()) || !s.is_finite()) {
            return Err(Error::Config(format!("channel {i} has non-positive std {s}")));
        }
        Ok(LinearNormalizer { mean, std })
    }

    pub fn mean(&self) -> &[T] {
        &self.mean
    }

    pub fn std(&self) -> &[T] {
        &self.std
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    fn affine(&self) -> (Vec<T>, Vec<T>) {
        let mul = self.std.iter().map(|&s| T::one() / s).collect();
        let add = self.mean.iter().zip(&self.std).map(|(&m, &s)| -m / s).collect();
        (mul, add)
    }

    fn per_channel(&self, x: &Tensor<T>, f: impl Fn(T, usize) -> T) -> Result<Tensor<T>> {
        let (c, hw) = channel_layout(x)?;
        if c != self.channels() {
            return Err(Error::shape("normalize", format!("normalizer has {} channels, input {c}", self.channels())));
        }
        let mut out = x.clone();
        for (p, plane) in out.data_mut().chunks_mut(hw).enumerate() {
            let ch = p % c;
            plane.iter_mut().for_each(|v| *v = f(*v, ch));
        }
        Ok(out)
    }

    pub fn normalize(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.per_channel(x, |v, c| (v - self.mean[c]) / self.std[c])
    }

    pub fn denormalize(&self, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.per_channel(y, |v, c| v * self.std[c] + self.mean[c])
    }

    pub fn normalize_on_tape(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let (mul, add) = self.affine();
        tape.channel_affine(x, &mul, &add)
    }
}

/// `(channels, pixels per channel plane)` for CHW or NCHW tensors.
fn channel_layout<T: Scalar>(x: &Tensor<T>) -> Result<(usize, usize)> {
    match x.shape() {
        [_, c, h, w] | [c, h, w] => Ok((*c, h * w)),
        s => Err(Error::shape("normalize", format!("expected CHW or NCHW, got {s:?}"))),
    }
}

/// Per-channel mean and population standard deviation over every pixel of
/// every field. Values are reduced in sorted order, so the result does not
/// depend on the order of `fields`.
pub fn fit_normalizer<T: Scalar>(fields: &[Tensor<T>]) -> Result<LinearNormalizer<T>> {
    let first = fields.first().ok_or_else(|| Error::Empty("no training fields to fit a normalizer".into()))?;
    let (c, _) = channel_layout(first)?;
    let mut per_channel: Vec<Vec<T>> = vec![Vec::new(); c];
    for f in fields {
        let (fc, hw) = channel_layout(f)?;
        if fc != c {
            return Err(Error::shape("fit_normalizer", format!("fields with {c} and {fc} channels")));
        }
        for (p, plane) in f.data().chunks(hw).enumerate() {
            per_channel[p % c].extend_from_slice(plane);
        }
    }
    let mut mean = Vec::with_capacity(c);
    let mut std = Vec::with_capacity(c);
    for (ch, vals) in per_channel.iter_mut().enumerate() {
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let n = T::lit(vals.len() as f64);
        let m = vals.iter().copied().sum::<T>() / n;
        let mut dev: Vec<T> = vals.iter().map(|&v| (v - m) * (v - m)).collect();
        dev.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
        let var = dev.iter().copied().sum::<T>() / n;
        if !(var > T::zero()) {
            return Err(Error::DegenerateStatistics {
                op: "fit_normalizer",
                detail: format!("channel {ch} has zero variance"),
            });
        }
        mean.push(m);
        std.push(var.sqrt());
    }
    LinearNormalizer::new(mean, std)
}

/// Where the gamma transform is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GammaPlacement {
    /// Predictand input channel and target; the loss lives in transformed space.
    InputAndTarget,
    /// Predictand input channel only; the loss lives in physical space.
    InputOnly,
}

impl fmt::Display for GammaPlacement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            GammaPlacement::InputAndTarget => "input_and_target",
            GammaPlacement::InputOnly => "input_only",
        })
    }
}

impl FromStr for GammaPlacement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input_and_target" => Ok(GammaPlacement::InputAndTarget),
            "input_only" => Ok(GammaPlacement::InputOnly),
            other => Err(Error::Config(format!("unknown gamma placement `{other}`"))),
        }
    }
}

/// Complete data path between physical units and network space:
/// gamma first, then linear normalization fitted on gamma-transformed data.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline<T> {
    pub gamma: GammaTransform<T>,
    pub placement: GammaPlacement,
    pub input_norm: LinearNormalizer<T>,
    pub target_norm: LinearNormalizer<T>,
}

impl<T: Scalar> Pipeline<T> {
    /// Fits both normalizers on the training split after applying `gamma` at
    /// its current value. Inputs are `C x H x W`, targets `1 x H x W`.
    pub fn fit(
        gamma: GammaTransform<T>,
        placement: GammaPlacement,
        train_inputs: &[&Tensor<T>],
        train_targets: &[&Tensor<T>],
    ) -> Result<Self> {
        let to_nchw = |t: &Tensor<T>| -> Result<Tensor<T>> {
            let mut s = t.shape().to_vec();
            if s.len() == 3 {
                s.insert(0, 1);
            }
            t.clone().reshape(s)
        };
        let inputs = train_inputs.iter().map(|t| to_nchw(t).map(|t| gamma.forward(&t))).collect::<Result<Vec<_>>>()?;
        let targets = train_targets
            .iter()
            .map(|t| {
                let t = to_nchw(t)?;
                Ok(match placement {
                    GammaPlacement::InputAndTarget => gamma.forward(&t),
                    GammaPlacement::InputOnly => t,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Pipeline {
            input_norm: fit_normalizer(&inputs)?,
            target_norm: fit_normalizer(&targets)?,
            gamma,
            placement,
        })
    }

    fn target_gamma(&self) -> bool {
        self.placement == GammaPlacement::InputAndTarget
    }

    /// Physical NCHW input -> network input.
    pub fn input_on_tape(&self, tape: &mut Tape<T>, x: Var, theta: Option<Var>) -> Result<Var> {
        let g = self.gamma.forward_on_tape(tape, x, theta)?;
        self.input_norm.normalize_on_tape(tape, g)
    }

    /// Physical target -> the space in which the loss is computed.
    pub fn target_on_tape(&self, tape: &mut Tape<T>, y: Var, theta: Option<Var>) -> Result<Var> {
        let g = if self.target_gamma() { self.target_gamma_on_tape(tape, y, theta)? } else { y };
        self.target_norm.normalize_on_tape(tape, g)
    }

    fn target_gamma_on_tape(&self, tape: &mut Tape<T>, y: Var, theta: Option<Var>) -> Result<Var> {
        let mut single = self.gamma.clone();
        single.applies_to = vec![0];
        single.forward_on_tape(tape, y, theta)
    }

    pub fn input_values(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.input_norm.normalize(&self.gamma.forward(x))
    }

    /// Physical target -> gamma space (not normalized).
    pub fn target_transformed(&self, y: &Tensor<T>) -> Tensor<T> {
        if self.target_gamma() {
            let mut single = self.gamma.clone();
            single.applies_to = vec![0];
            single.forward(y)
        } else {
            y.clone()
        }
    }

    /// Network output -> `(transformed space, physical units)`.
    pub fn output_values(&self, out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let transformed = self.target_norm.denormalize(out)?;
        let physical = if self.target_gamma() {
            let mut single = self.gamma.clone();
            single.applies_to = vec![0];
            single.inverse(&transformed)
        } else {
            transformed.clone()
        };
        Ok((transformed, physical))
    }
}
