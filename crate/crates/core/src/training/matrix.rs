//! The six-cell comparison {L1, L2} x {no transform, fixed gamma, learnable gamma}.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::train::{evaluate_checkpoint, train, ExperimentSpec, TrainHistory};
use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::Result;
use crate::losses::{LossKind, MetricsReport};
use crate::preprocessing::GammaMode;
use crate::scalar::Scalar;

/// Row order of the results table.
pub const MATRIX_CELLS: [(LossKind, GammaMode); 6] = [
    (LossKind::L1, GammaMode::None),
    (LossKind::L2, GammaMode::None),
    (LossKind::L1, GammaMode::Fixed),
    (LossKind::L1, GammaMode::Learnable),
    (LossKind::L2, GammaMode::Fixed),
    (LossKind::L2, GammaMode::Learnable),
];

#[derive(Clone, Debug, PartialEq)]
pub struct CellMetrics {
    /// Test-split scores of the retained (best validation) weights.
    pub test: MetricsReport,
    pub gamma_final: f64,
    pub best_epoch: usize,
    pub history: TrainHistory,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub spec: ExperimentSpec,
    pub label: String,
    pub seed: u64,
    pub outcome: std::result::Result<CellMetrics, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub variable: String,
    /// Grouped by seed, each group in [`MATRIX_CELLS`] order.
    pub rows: Vec<CellResult>,
}

/// Mean and sample standard deviation of one method over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct SummaryRow {
    pub label: String,
    pub n_ok: usize,
    pub n_failed: usize,
    pub avg_abs_diff: (f64, f64),
    pub avg_mse: (f64, f64),
    pub gamma_final: (f64, f64),
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = if v.len() > 1 { (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() } else { 0.0 };
    (m, s)
}

pub const CSV_COLUMNS: [&str; 16] = [
    "method",
    "avg_abs_diff",
    "avg_mse",
    "avg_abs_diff_transformed",
    "avg_mse_transformed",
    "gamma_final",
    "seed",
    "status",
    "variable",
    "best_epoch",
    "placement",
    "optimizer",
    "lr",
    "batch_size",
    "epochs",
    "base_width",
];

impl ResultsTable {
    pub fn labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for r in &self.rows {
            if !out.contains(&r.label) {
                out.push(r.label.clone());
            }
        }
        out
    }

    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.outcome.is_err())
    }

    pub fn summary(&self) -> Vec<SummaryRow> {
        self.labels()
            .into_iter()
            .map(|label| {
                let ok: Vec<&CellMetrics> =
                    self.rows.iter().filter(|r| r.label == label).filter_map(|r| r.outcome.as_ref().ok()).collect();
                let failed = self.rows.iter().filter(|r| r.label == label && r.outcome.is_err()).count();
                let col = |f: fn(&CellMetrics) -> f64| mean_std(&ok.iter().map(|c| f(c)).collect::<Vec<_>>());
                SummaryRow {
                    avg_abs_diff: col(|c| c.test.avg_abs_diff),
                    avg_mse: col(|c| c.test.avg_mse),
                    gamma_final: col(|c| c.gamma_final),
                    n_ok: ok.len(),
                    n_failed: failed,
                    label,
                }
            })
            .collect()
    }

    /// Mean test MSE / abs diff for `label` over successful seeds.
    pub fn mean_of(&self, label: &str) -> Option<SummaryRow> {
        self.summary().into_iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut s = CSV_COLUMNS.join(",");
        s.push('\n');
        for r in &self.rows {
            let t = &r.spec.train;
            let (metrics, status, best) = match &r.outcome {
                Ok(c) => (
                    format!(
                        "{},{},{},{},{}",
                        c.test.avg_abs_diff,
                        c.test.avg_mse,
                        c.test.avg_abs_diff_transformed,
                        c.test.avg_mse_transformed,
                        c.gamma_final
                    ),
                    "ok".to_string(),
                    c.best_epoch.to_string(),
                ),
                Err(e) => (",,,,".to_string(), format!("failed: {}", e.replace([',', '\n'], ";")), String::new()),
            };
            s += &format!(
                "{},{metrics},{},{status},{},{best},{},adam(b1={} b2={} eps={}),{},{},{},{}\n",
                r.label,
                r.seed,
                self.variable,
                r.spec.placement,
                t.adam.beta1,
                t.adam.beta2,
                t.adam.eps,
                t.adam.lr,
                t.batch_size,
                t.epochs,
                r.spec.model.base_width,
            );
        }
        s
    }

    /// Aligned plain-text table of means (± sample std when several seeds).
    pub fn to_text(&self) -> String {
        let rows = self.summary();
        let multi = rows.iter().any(|r| r.n_ok + r.n_failed > 1);
        let fmt = |(m, s): (f64, f64)| if multi { format!("{m:.6} ± {s:.6}") } else { format!("{m:.6}") };
        let mut lines = vec![vec!["method".to_string(), "avg ABS diff".into(), "avg MSE".into(), "gamma".into(), "runs".into()]];
        for r in &rows {
            let runs = if r.n_failed > 0 { format!("{} ok, {} FAILED", r.n_ok, r.n_failed) } else { r.n_ok.to_string() };
            lines.push(vec![r.label.clone(), fmt(r.avg_abs_diff), fmt(r.avg_mse), fmt(r.gamma_final), runs]);
        }
        let widths: Vec<usize> =
            (0..5).map(|i| lines.iter().map(|l| l[i].chars().count()).max().unwrap_or(0)).collect();
        let mut out = format!("{}\n", self.variable);
        for l in &lines {
            let cells: Vec<String> = l.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
            out += cells.join("  ").trim_end();
            out.push('\n');
        }
        out
    }
}

/// Specs for every cell and seed, derived from `base` (whose loss and
/// preprocessing fields are overridden).
pub fn matrix_specs(base: &ExperimentSpec, seeds: &[u64]) -> Vec<ExperimentSpec> {
    seeds
        .iter()
        .flat_map(|&seed| {
            MATRIX_CELLS.iter().map(move |&(loss, preproc)| {
                let mut s = base.clone();
                s.loss = loss;
                s.preproc = preproc;
                s.train.seed = seed;
                s
            })
        })
        .collect()
}

/// Called once per finished cell with the retained checkpoint (absent when
/// the cell failed). May run on any worker thread.
pub type CellCallback<'a, T> = &'a (dyn Fn(&CellResult, Option<&Checkpoint<T>>) + Sync);

/// Trains and evaluates `specs` on shared data with up to `jobs` worker
/// threads. Row order follows `specs` regardless of completion order; a
/// failing cell is recorded rather than aborting the run.
pub fn run_cells<T: Scalar>(
    variable: &str,
    specs: &[ExperimentSpec],
    data: &Dataset,
    jobs: usize,
    on_done: CellCallback<'_, T>,
) -> ResultsTable {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CellResult>>> = Mutex::new(vec![None; specs.len()]);
    let work = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(spec) = specs.get(i) else { break };
        let (outcome, ckpt) = match run_one::<T>(spec, data) {
            Ok((m, c)) => (Ok(m), Some(c)),
            Err(e) => (Err(e.to_string()), None),
        };
        let result = CellResult { label: spec.label(), seed: spec.train.seed, spec: spec.clone(), outcome };
        on_done(&result, ckpt.as_ref());
        slots.lock().unwrap()[i] = Some(result);
    };
    let jobs = jobs.clamp(1, specs.len().max(1));
    if jobs == 1 {
        work();
    } else {
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(work);
            }
        });
    }
    let rows = slots.into_inner().unwrap().into_iter().map(|r| r.expect("every cell ran")).collect();
    ResultsTable { variable: variable.to_string(), rows }
}

fn run_one<T: Scalar>(spec: &ExperimentSpec, data: &Dataset) -> Result<(CellMetrics, Checkpoint<T>)> {
    let out = train::<T>(spec, data, None)?;
    let test = evaluate_checkpoint(&out.best, &data.test, spec.train.batch_size)?;
    let metrics =
        CellMetrics { test, gamma_final: out.final_gamma, best_epoch: out.history.best_epoch, history: out.history };
    Ok((metrics, out.best))
}

/// All six cells for every seed.
pub fn run_matrix<T: Scalar>(base: &ExperimentSpec, data: &Dataset, seeds: &[u64], jobs: usize) -> ResultsTable {
    run_cells::<T>(&data.spec.variable.to_string(), &matrix_specs(base, seeds), data, jobs, &|_, _| {})
}
