use super::conv::{conv2d_backward, conv2d_forward, ConvGeometry};
use super::norm::{batchnorm_backward, batchnorm_forward, BatchNormState, NormMode, NormSaved};
use super::ops::{self, signed_pow_scalar, zip_map};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that made it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Relu(Var),
    Conv2d { input: Var, weight: Var, bias: Var, geom: ConvGeometry },
    BatchNorm { input: Var, scale: Var, shift: Var, saved: NormSaved<T> },
    Upsample2x(Var),
    Concat(Var, Var),
    SliceChannels { input: Var, start: usize, end: usize },
    ChannelAffine { input: Var, mul: Vec<T> },
    SignedPow { input: Var, exponent: Var },
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op<T>,
}

/// Append-only record of a forward computation.
///
/// Nodes are stored in creation order, so every node's inputs precede it and
/// a reverse sweep is a valid topological order for backpropagation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, populated by [`Tape::backward`] for every node
    /// that requires a gradient and lies upstream of the loss.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node { value, requires_grad, grad: None, op });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = zip_map("add", self.value(a), self.value(b), |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, rg, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = zip_map("sub", self.value(a), self.value(b), |x, y| x - y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, rg, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = zip_map("mul", self.value(a), self.value(b), |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, rg, Op::Mul(a, b)))
    }

    pub fn scalar_mul(&mut self, a: Var, c: T) -> Var {
        let y = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(y, rg, Op::Scale(a, c))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x.exp());
        let rg = self.any_grad(&[a]);
        self.push(y, rg, Op::Exp(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x.abs());
        let rg = self.any_grad(&[a]);
        self.push(y, rg, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| x * x);
        let rg = self.any_grad(&[a]);
        self.push(y, rg, Op::Square(a))
    }

    /// Sum of all elements as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().copied().sum();
        let rg = self.any_grad(&[a]);
        self.push(Tensor::scalar(s), rg, Op::Sum(a))
    }

    /// Mean of all elements as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(Error::Empty("mean of an empty tensor".into()));
        }
        let m = t.data().iter().copied().sum::<T>() / T::lit(t.numel() as f64);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::scalar(m), rg, Op::Mean(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.any_grad(&[a]);
        self.push(y, rg, Op::Relu(a))
    }

    /// Which side of the kink at zero every `relu` and `abs` input lies on,
    /// in tape order. Two evaluations with equal signatures lie in the same
    /// smooth piece of the recorded function.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for n in &self.nodes {
            if let Op::Relu(a) | Op::Abs(a) = n.op {
                sig.extend(self.nodes[a.0].value.data().iter().map(|&x| x > T::zero()));
            }
        }
        sig
    }

    /// Cross-correlation of an NCHW input with a `(Cout, Cin, Kh, Kw)` kernel.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeometry::new(self.value(input), self.value(weight), self.value(bias), stride, padding)?;
        let y = conv2d_forward(&geom, self.value(input), self.value(weight), self.value(bias));
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(y, rg, Op::Conv2d { input, weight, bias, geom }))
    }

    /// Batch normalization over `(N, H, W)` per channel. In train mode the
    /// running statistics in `state` are updated.
    pub fn batchnorm2d(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        state: &mut BatchNormState<T>,
        mode: NormMode,
    ) -> Result<Var> {
        let (y, saved) = batchnorm_forward(self.value(input), self.value(scale), self.value(shift), state, mode)?;
        let rg = self.any_grad(&[input, scale, shift]);
        Ok(self.push(y, rg, Op::BatchNorm { input, scale, shift, saved }))
    }

    pub fn upsample_nearest2x(&mut self, input: Var) -> Result<Var> {
        let y = ops::upsample_nearest2x(self.value(input))?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(y, rg, Op::Upsample2x(input)))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::concat_channels(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(y, rg, Op::Concat(a, b)))
    }

    /// Channels `start..end` of an NCHW tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, end: usize) -> Result<Var> {
        let y = ops::slice_channels(self.value(input), start, end)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(y, rg, Op::SliceChannels { input, start, end }))
    }

    /// Per-channel `x * mul[c] + add[c]` with constant coefficients.
    pub fn channel_affine(&mut self, input: Var, mul: &[T], add: &[T]) -> Result<Var> {
        let y = ops::channel_affine(self.value(input), mul, add)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(y, rg, Op::ChannelAffine { input, mul: mul.to_vec() }))
    }

    /// Elementwise `sign(x) * |x|^e` for a single-element exponent `e > 0`.
    ///
    /// Both partial derivatives are defined as zero at `x = 0`.
    pub fn signed_pow(&mut self, input: Var, exponent: Var) -> Result<Var> {
        const OP: &str = "signed_pow";
        let e = self
            .value(exponent)
            .item()
            .ok_or_else(|| Error::shape(OP, "exponent must hold a single element"))?;
        if !(e > T::zero()) || !e.is_finite() {
            return Err(Error::Domain { op: OP, detail: format!("exponent must be positive and finite, got {e}") });
        }
        let y = self.value(input).map(|x| signed_pow_scalar(x, e));
        let rg = self.any_grad(&[input, exponent]);
        Ok(self.push(y, rg, Op::SignedPow { input, exponent }))
    }

    /// Reverse sweep from a rank-0 `loss`; gradients accumulate (sum) over
    /// every use of a node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0];
        if lv.value.rank() != 0 {
            return Err(Error::NonScalarLoss(lv.value.shape().to_vec()));
        }
        if !lv.requires_grad {
            return Ok(());
        }
        self.accumulate(loss, vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[i].grad.take() else { continue };
            let contribs = self.local_grads(i, &g);
            self.nodes[i].grad = Some(g);
            for (v, d) in contribs {
                self.accumulate(v, d);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, d: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => g.iter_mut().zip(d).for_each(|(a, b)| *a += b),
            None => node.grad = Some(d),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let mut out = Vec::new();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        out.push((v, g.to_vec()));
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().map(|&x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(&d, &y)| d * y).collect()));
                }
                if self.wants(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(&d, &x)| d * x).collect()));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|&d| d * *c).collect())),
            Op::Exp(a) => {
                let y = self.nodes[i].value.data();
                out.push((*a, g.iter().zip(y).map(|(&d, &y)| d * y).collect()));
            }
            Op::Abs(a) => out.push((
                *a,
                g.iter()
                    .zip(val(*a))
                    .map(|(&d, &x)| if x == T::zero() { T::zero() } else { d * x.signum() })
                    .collect(),
            )),
            Op::Square(a) => {
                let two = T::lit(2.0);
                out.push((*a, g.iter().zip(val(*a)).map(|(&d, &x)| two * x * d).collect()));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; val(*a).len()])),
            Op::Mean(a) => {
                let n = val(*a).len();
                out.push((*a, vec![g[0] / T::lit(n as f64); n]));
            }
            Op::Relu(a) => out.push((
                *a,
                g.iter().zip(val(*a)).map(|(&d, &x)| if x > T::zero() { d } else { T::zero() }).collect(),
            )),
            Op::Conv2d { input, weight, bias, geom } => {
                let need = [self.wants(*input), self.wants(*weight), self.wants(*bias)];
                let (dx, dw, db) = conv2d_backward(
                    geom,
                    &self.nodes[input.0].value,
                    &self.nodes[weight.0].value,
                    g,
                    need,
                );
                for (v, d) in [(*input, dx), (*weight, dw), (*bias, db)] {
                    if let Some(d) = d {
                        out.push((v, d));
                    }
                }
            }
            Op::BatchNorm { input, scale, shift, saved } => {
                let (dx, ds, db) =
                    batchnorm_backward(self.nodes[input.0].value.shape(), &self.nodes[scale.0].value, saved, g);
                for (v, d) in [(*input, dx), (*scale, ds), (*shift, db)] {
                    if self.wants(v) {
                        out.push((v, d));
                    }
                }
            }
            Op::Upsample2x(a) => {
                out.push((*a, ops::upsample_nearest2x_backward(self.nodes[a.0].value.shape(), g)));
            }
            Op::Concat(a, b) => {
                let sa = self.nodes[a.0].value.shape();
                let (n, ca, hw) = (sa[0], sa[1], sa[2] * sa[3]);
                let cb = self.nodes[b.0].value.shape()[1];
                let (wa, wb) = (ca * hw, cb * hw);
                let mut ga = Vec::with_capacity(n * wa);
                let mut gb = Vec::with_capacity(n * wb);
                for s in 0..n {
                    let row = &g[s * (wa + wb)..(s + 1) * (wa + wb)];
                    ga.extend_from_slice(&row[..wa]);
                    gb.extend_from_slice(&row[wa..]);
                }
                if self.wants(*a) {
                    out.push((*a, ga));
                }
                if self.wants(*b) {
                    out.push((*b, gb));
                }
            }
            Op::SliceChannels { input, start, end } => out.push((
                *input,
                ops::slice_channels_backward(self.nodes[input.0].value.shape(), *start, *end, g),
            )),
            Op::ChannelAffine { input, mul } => out.push((
                *input,
                ops::channel_affine_backward(self.nodes[input.0].value.shape(), mul, g),
            )),
            Op::SignedPow { input, exponent } => {
                let e = self.nodes[exponent.0].value.data()[0];
                let x = val(*input);
                if self.wants(*input) {
                    let em1 = e - T::one();
                    out.push((
                        *input,
                        g.iter()
                            .zip(x)
                            .map(|(&d, &x)| if x == T::zero() { T::zero() } else { d * e * x.abs().powf(em1) })
                            .collect(),
                    ));
                }
                if self.wants(*exponent) {
                    let y = self.nodes[i].value.data();
                    let de: T = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(&d, (&x, &y))| if x == T::zero() { T::zero() } else { d * y * x.abs().ln() })
                        .sum();
                    let n = val(*exponent).len();
                    out.push((*exponent, vec![de; n]));
                }
            }
        }
        out
    }
}
