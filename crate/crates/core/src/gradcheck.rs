//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Gradients smaller than this are compared in absolute terms.
pub const REL_ERR_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Entries whose `x - h` and `x + h` evaluations sit on different sides
    /// of a `relu` or `abs` kink. A central difference across a kink does not
    /// estimate the derivative, so these are left out and replaced.
    pub skipped: usize,
    pub max_rel_err: f64,
    /// `(input index, element index, analytic, numeric)` of the worst entry.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_err < tol
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

/// Compares `d loss / d inputs` from the tape against central differences
/// with step `h`.
///
/// `build` receives a fresh tape and one leaf per input (all requiring
/// gradients) and returns the scalar loss. With `max_samples = Some((k, seed))`
/// elements are drawn uniformly without replacement over all inputs until `k`
/// have been compared; kink-crossing draws do not count toward `k`.
pub fn check_gradients<F>(
    inputs: &[Tensor<f64>],
    mut build: F,
    h: f64,
    max_samples: Option<(usize, u64)>,
) -> Result<GradCheckReport>
where
    F: FnMut(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let mut eval = |values: &[Tensor<f64>], with_grad: bool| -> Result<(f64, Vec<bool>, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.leaf(t.clone(), with_grad)).collect();
        let loss = build(&mut tape, &vars)?;
        let l = tape.value(loss).item().ok_or(Error::NonScalarLoss(tape.value(loss).shape().to_vec()))?;
        let sig = tape.kink_signature();
        let mut grads = Vec::new();
        if with_grad {
            tape.backward(loss)?;
            for (v, t) in vars.iter().zip(values) {
                grads.push(tape.grad(*v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]));
            }
        }
        Ok((l, sig, grads))
    };

    let (_, base_sig, analytic) = eval(inputs, true)?;
    let flat: Vec<(usize, usize)> =
        inputs.iter().enumerate().flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j))).collect();
    let (order, want): (Vec<(usize, usize)>, usize) = match max_samples {
        Some((k, seed)) if k < flat.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let idx = sample(&mut rng, flat.len(), flat.len()).into_vec();
            (idx.into_iter().map(|i| flat[i]).collect(), k)
        }
        _ => {
            let n = flat.len();
            (flat, n)
        }
    };

    let mut work: Vec<Tensor<f64>> = inputs.to_vec();
    let mut report = GradCheckReport { checked: 0, skipped: 0, max_rel_err: 0.0, worst: None };
    for (ti, ei) in order {
        if report.checked == want {
            break;
        }
        let orig = work[ti].data()[ei];
        work[ti].data_mut()[ei] = orig + h;
        let (fp, sig_p, _) = eval(&work, false)?;
        work[ti].data_mut()[ei] = orig - h;
        let (fm, sig_m, _) = eval(&work, false)?;
        work[ti].data_mut()[ei] = orig;
        if sig_p != base_sig || sig_m != base_sig {
            report.skipped += 1;
            continue;
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[ti][ei];
        let err = relative_error(a, numeric);
        report.checked += 1;
        if err > report.max_rel_err || report.worst.is_none() {
            report.max_rel_err = report.max_rel_err.max(err);
            report.worst = Some((ti, ei, a, numeric));
        }
    }
    Ok(report)
}
