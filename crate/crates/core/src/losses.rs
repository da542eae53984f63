//! Training losses and evaluation metrics.
//!
//! Both losses average over every element of the batch, so their scale does
//! not depend on batch size.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    L1,
    L2,
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LossKind::L1 => "L1",
            LossKind::L2 => "L2",
        })
    }
}

impl FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "L1" | "l1" => Ok(LossKind::L1),
            "L2" | "l2" => Ok(LossKind::L2),
            o => Err(Error::Config(format!("unknown loss `{o}` (L1|L2)"))),
        }
    }
}

fn check_shapes<T: Scalar>(tape: &Tape<T>, pred: Var, gt: Var, op: &'static str) -> Result<()> {
    let (a, b) = (tape.value(pred).shape(), tape.value(gt).shape());
    if a != b {
        return Err(Error::shape(op, format!("prediction {a:?} vs target {b:?}")));
    }
    Ok(())
}

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    check_shapes(tape, pred, gt, "l1_loss")?;
    let d = tape.sub(pred, gt)?;
    let a = tape.abs(d);
    tape.mean(a)
}

/// Mean squared difference.
pub fn l2_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    check_shapes(tape, pred, gt, "l2_loss")?;
    let d = tape.sub(pred, gt)?;
    let s = tape.square(d);
    tape.mean(s)
}

pub fn loss<T: Scalar>(kind: LossKind, tape: &mut Tape<T>, pred: Var, gt: Var) -> Result<Var> {
    match kind {
        LossKind::L1 => l1_loss(tape, pred, gt),
        LossKind::L2 => l2_loss(tape, pred, gt),
    }
}

/// Test-set scores. The `_transformed` pair is measured before the inverse
/// preprocessing transform (identical to the physical pair without gamma).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MetricsReport {
    pub avg_abs_diff: f64,
    pub avg_mse: f64,
    pub avg_abs_diff_transformed: f64,
    pub avg_mse_transformed: f64,
    pub n_pixels: usize,
}

impl MetricsReport {
    /// The score a loss is selected against: abs diff for L1, MSE for L2.
    pub fn matching(&self, kind: LossKind) -> f64 {
        match kind {
            LossKind::L1 => self.avg_abs_diff,
            LossKind::L2 => self.avg_mse,
        }
    }
}

/// Running sums over batches; finishing yields the flat per-pixel mean.
#[derive(Clone, Debug, Default)]
pub struct MetricsAccumulator {
    abs: f64,
    sq: f64,
    abs_t: f64,
    sq_t: f64,
    n: usize,
}

impl MetricsAccumulator {
    pub fn add<T: Scalar>(
        &mut self,
        pred_physical: &Tensor<T>,
        gt_physical: &Tensor<T>,
        pred_transformed: &Tensor<T>,
        gt_transformed: &Tensor<T>,
    ) -> Result<()> {
        for (p, g) in [(pred_physical, gt_physical), (pred_transformed, gt_transformed), (pred_physical, pred_transformed)] {
            if p.shape() != g.shape() {
                return Err(Error::shape("evaluate_metrics", format!("{:?} vs {:?}", p.shape(), g.shape())));
            }
        }
        let residuals = |p: &Tensor<T>, g: &Tensor<T>, abs: &mut f64, sq: &mut f64| {
            for (a, b) in p.data().iter().zip(g.data()) {
                let d = (*a - *b).to_f64_lossy();
                *abs += d.abs();
                *sq += d * d;
            }
        };
        residuals(pred_physical, gt_physical, &mut self.abs, &mut self.sq);
        residuals(pred_transformed, gt_transformed, &mut self.abs_t, &mut self.sq_t);
        self.n += pred_physical.numel();
        Ok(())
    }

    pub fn finish(&self) -> Result<MetricsReport> {
        if self.n == 0 {
            return Err(Error::Empty("no test pixels to evaluate".into()));
        }
        let n = self.n as f64;
        Ok(MetricsReport {
            avg_abs_diff: self.abs / n,
            avg_mse: self.sq / n,
            avg_abs_diff_transformed: self.abs_t / n,
            avg_mse_transformed: self.sq_t / n,
            n_pixels: self.n,
        })
    }
}

pub fn evaluate_metrics<T: Scalar>(
    pred_physical: &Tensor<T>,
    gt_physical: &Tensor<T>,
    pred_transformed: &Tensor<T>,
    gt_transformed: &Tensor<T>,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::default();
    acc.add(pred_physical, gt_physical, pred_transformed, gt_transformed)?;
    acc.finish()
}
