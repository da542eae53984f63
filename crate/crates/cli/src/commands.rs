use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use downscale_core::checkpoint::Checkpoint;
use downscale_core::checks::run_checks;
use downscale_core::config::LabConfig;
use downscale_core::data::{generate_dataset, load_dataset, precip_stats, save_dataset, Dataset, SamplePair, Split, Variable};
use downscale_core::render::{image_name, render_heatmap, render_panel, shared_range, symmetric_range, ColorMap};
use downscale_core::training::{
    evaluate_checkpoint, matrix_specs, predict_pair, run_cells, train as train_cell, CellMetrics, CellResult,
    ExperimentSpec, ResultsTable, MATRIX_CELLS,
};
use downscale_core::{Error, Tensor};

use crate::{Common, DataSource};

pub const EXIT_OTHER: u8 = 1;
pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_DIVERGENCE: u8 = 3;
pub const EXIT_CELL_FAILURE: u8 = 4;
pub const EXIT_CHECK_FAILURE: u8 = 5;

pub const THREADS_ENV: &str = "DOWNSCALE_LAB_THREADS";
pub const DATASET_FILE: &str = "dataset.dsl";
pub const CHECKPOINT_FILE: &str = "checkpoint.dslc";
pub const MANIFEST_FILE: &str = "manifest.txt";

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    fn new(code: u8, message: impl Into<String>) -> Self {
        Failure { code, message: message.into() }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::UnknownKey(_) | Error::Calibration(_) => EXIT_CONFIG,
            Error::Divergence { .. } | Error::NonFiniteGradient { .. } => EXIT_DIVERGENCE,
            _ => EXIT_OTHER,
        };
        Failure::new(code, e.to_string())
    }
}

type Outcome = Result<(), Failure>;

fn load_config(common: &Common) -> Result<LabConfig, Failure> {
    let text = match &common.config {
        Some(p) => std::fs::read_to_string(p).map_err(|e| Failure::new(EXIT_CONFIG, format!("{}: {e}", p.display())))?,
        None => String::new(),
    };
    Ok(LabConfig::parse(&text, &common.set)?)
}

fn write(path: &Path, text: &str) -> Outcome {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

pub fn gen_data(common: &Common) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.data.seed = s;
    }
    let ds = generate_dataset(&cfg.data)?;
    let path = common.out.join(DATASET_FILE);
    save_dataset(&ds, &path)?;
    write(&common.out.join(MANIFEST_FILE), &cfg.manifest(&command_line()))?;
    println!("dataset {}", path.display());
    println!("variable {}", ds.spec.variable);
    for split in Split::ALL {
        println!("{split}_pairs {}", ds.split(split).len());
    }
    let targets: Vec<&Tensor> = ds.train.iter().chain(&ds.val).chain(&ds.test).map(|p| &p.target).collect();
    if ds.spec.variable == Variable::PrecipitationLike {
        let s = precip_stats(targets.iter().copied());
        println!("zero_fraction {:.4}", s.zero_fraction);
        println!("tail_ratio {:.2}", s.tail_ratio);
    } else {
        let vals: Vec<f64> = targets.iter().flat_map(|t| t.data().iter().copied()).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        println!("target_mean {mean:.6}");
        println!("target_std {std:.6}");
    }
    Ok(())
}

/// Loads or generates the dataset and makes the config agree with it.
fn dataset_for(cfg: &mut LabConfig, common: &Common, source: &DataSource) -> Result<Dataset, Failure> {
    if source.gen {
        let ds = generate_dataset(&cfg.data)?;
        save_dataset(&ds, &source.data.clone().unwrap_or_else(|| common.out.join(DATASET_FILE)))?;
        return Ok(ds);
    }
    let path = source.data.clone().unwrap_or_else(|| common.out.join(DATASET_FILE));
    if !path.exists() {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("dataset {} not found; pass --data or --gen", path.display()),
        ));
    }
    let ds = load_dataset(&path)?;
    if ds.spec.variable != cfg.data.variable {
        return Err(Failure::new(
            EXIT_CONFIG,
            format!("config variable is {} but {} holds {} data", cfg.data.variable, path.display(), ds.spec.variable),
        ));
    }
    // The manifest then records the recipe of the data actually used.
    cfg.data = ds.spec.clone();
    Ok(ds)
}

fn single_row_table(variable: Variable, spec: &ExperimentSpec, metrics: CellMetrics) -> ResultsTable {
    ResultsTable {
        variable: variable.to_string(),
        rows: vec![CellResult { spec: spec.clone(), label: spec.label(), seed: spec.train.seed, outcome: Ok(metrics) }],
    }
}

pub fn train(common: &Common, source: &DataSource) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    let ds = dataset_for(&mut cfg, common, source)?;
    let spec = cfg.experiment.clone();
    let epochs = spec.train.epochs;
    let verbose = common.verbose;
    let mut progress = |r: &downscale_core::training::EpochRecord| {
        if verbose {
            eprintln!(
                "epoch {}/{epochs} loss {:.6} val_abs {:.6} val_mse {:.6} gamma {:.4} ({:.1}s)",
                r.epoch, r.train_loss, r.val.avg_abs_diff, r.val.avg_mse, r.gamma, r.wall_seconds
            );
        }
    };
    let start = Instant::now();
    let out = train_cell::<f64>(&spec, &ds, Some(&mut progress))?;
    let test = evaluate_checkpoint(&out.best, &ds.test, spec.train.batch_size)?;
    let dir = &common.out;
    out.best.save(&dir.join(CHECKPOINT_FILE))?;
    write(&dir.join("history.csv"), &out.history.to_csv())?;
    let metrics = CellMetrics {
        test: test.clone(),
        gamma_final: out.final_gamma,
        best_epoch: out.history.best_epoch,
        history: out.history,
    };
    write(&dir.join("metrics.csv"), &single_row_table(cfg.data.variable, &spec, metrics).to_csv())?;
    write(&dir.join(MANIFEST_FILE), &cfg.manifest(&command_line()))?;
    println!("method {}", spec.label());
    println!("avg_abs_diff {}", test.avg_abs_diff);
    println!("avg_mse {}", test.avg_mse);
    println!("gamma_final {}", out.final_gamma);
    println!("elapsed_seconds {:.1}", start.elapsed().as_secs_f64());
    Ok(())
}

fn parse_split(s: &str) -> Result<Split, Failure> {
    Ok(s.parse::<Split>()?)
}

pub fn eval(checkpoint: &Path, data: &Path, split: &str, out: Option<&Path>) -> Outcome {
    let split = parse_split(split)?;
    let ckpt = Checkpoint::<f64>::load(checkpoint)?;
    let ds = load_dataset(data)?;
    let m = evaluate_checkpoint(&ckpt, ds.split(split), 8)?;
    let text = format!(
        "split {split}\navg_abs_diff {}\navg_mse {}\navg_abs_diff_transformed {}\navg_mse_transformed {}\ngamma {}\n",
        m.avg_abs_diff,
        m.avg_mse,
        m.avg_abs_diff_transformed,
        m.avg_mse_transformed,
        ckpt.pipeline.gamma.gamma()
    );
    print!("{text}");
    if let Some(dir) = out {
        write(&dir.join("eval.txt"), &text)?;
        let manifest = format!(
            "# downscale-lab {}\n# command: {}\ncheckpoint = {}\ndata = {}\nsplit = {split}\n",
            env!("CARGO_PKG_VERSION"),
            command_line(),
            checkpoint.display(),
            data.display()
        );
        write(&dir.join(MANIFEST_FILE), &manifest)?;
    }
    Ok(())
}

/// Worker count from the flag or config, capped by the environment.
fn worker_count(requested: usize) -> Result<usize, Failure> {
    let mut jobs = requested.max(1);
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let cap: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|&c| c > 0)
            .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
        jobs = jobs.min(cap);
    }
    Ok(jobs)
}

fn cell_dir(out: &Path, r: &CellResult) -> PathBuf {
    out.join("cells").join(format!("{}_seed{}", r.label, r.seed))
}

fn predictand_plane(pair: &SamplePair) -> Result<Tensor, Error> {
    let s = pair.input.shape();
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    Tensor::new(vec![1, 1, h, w], pair.input.data()[..h * w].to_vec())
}

pub fn matrix(common: &Common, source: &DataSource, jobs: Option<usize>) -> Outcome {
    let mut cfg = load_config(common)?;
    if let Some(s) = common.seed {
        cfg.set_seed(s);
    }
    if let Some(j) = jobs {
        cfg.jobs = j;
    }
    cfg.validate()?;
    let ds = dataset_for(&mut cfg, common, source)?;
    let workers = worker_count(cfg.jobs)?;
    let specs = matrix_specs(&cfg.experiment, &cfg.seeds);
    let first_seed = cfg.seeds[0];
    let panel_ckpts: Mutex<Vec<Option<Checkpoint<f64>>>> = Mutex::new(vec![None; MATRIX_CELLS.len()]);
    let write_errors: Mutex<Vec<String>> = Mutex::new(Vec::new());
    let out = common.out.clone();
    let base = cfg.clone();
    let on_done = |r: &CellResult, ckpt: Option<&Checkpoint<f64>>| {
        let dir = cell_dir(&out, r);
        let mut cell_cfg = base.clone();
        cell_cfg.experiment = r.spec.clone();
        cell_cfg.seeds = vec![r.seed];
        let mut result = write(&dir.join(MANIFEST_FILE), &cell_cfg.manifest(&command_line()));
        match (&r.outcome, ckpt) {
            (Ok(m), Some(c)) => {
                eprintln!("{} seed {}: avg_abs_diff {:.6} avg_mse {:.6}", r.label, r.seed, m.test.avg_abs_diff, m.test.avg_mse);
                result = result
                    .and_then(|_| c.save(&dir.join(CHECKPOINT_FILE)).map_err(Failure::from))
                    .and_then(|_| write(&dir.join("history.csv"), &m.history.to_csv()))
                    .and_then(|_| {
                        let table = ResultsTable { variable: base.data.variable.to_string(), rows: vec![r.clone()] };
                        write(&dir.join("metrics.csv"), &table.to_csv())
                    });
                if r.seed == first_seed {
                    if let Some(i) = specs.iter().position(|s| s.train.seed == r.seed && s.label() == r.label) {
                        panel_ckpts.lock().unwrap()[i % MATRIX_CELLS.len()] = Some(c.clone());
                    }
                }
            }
            (Err(e), _) => {
                eprintln!("{} seed {}: FAILED {e}", r.label, r.seed);
                result = result.and_then(|_| write(&dir.join("error.txt"), e));
            }
            (Ok(_), None) => {}
        }
        if let Err(f) = result {
            write_errors.lock().unwrap().push(f.message);
        }
    };
    let table = run_cells::<f64>(&cfg.data.variable.to_string(), &specs, &ds, workers, &on_done);
    if let Some(msg) = write_errors.into_inner().unwrap().into_iter().next() {
        return Err(Failure::new(EXIT_OTHER, msg));
    }
    write(&common.out.join("results.csv"), &table.to_csv())?;
    write(&common.out.join("results.txt"), &table.to_text())?;
    write(&common.out.join(MANIFEST_FILE), &cfg.manifest(&command_line()))?;
    print!("{}", table.to_text());

    let ckpts = panel_ckpts.into_inner().unwrap();
    if let Some(pair) = ds.test.first() {
        let variable = cfg.data.variable.to_string();
        let truth = pair.target.clone().reshape(vec![1, 1, pair.target.shape()[1], pair.target.shape()[2]])?;
        let input = predictand_plane(pair)?;
        let range = shared_range(&[&truth, &input]);
        let mut preds: Vec<(String, Tensor)> = Vec::new();
        for (i, c) in ckpts.iter().enumerate() {
            let label = specs[i].label();
            match c {
                Some(c) => preds.push((label, predict_pair(c, pair)?)),
                // A failed cell is drawn as a flat panel at the range minimum.
                None => preds.push((format!("{label} (failed)"), truth.map(|_| range.0))),
            }
        }
        let mut panels: Vec<(&str, &Tensor)> = vec![("truth", &truth), ("input", &input)];
        panels.extend(preds.iter().map(|(l, t)| (l.as_str(), t)));
        render_panel(&panels, range, &ColorMap::sequential(), &common.out.join(image_name(&variable, "matrix", "panel")))?;
        let diffs: Vec<(String, Tensor)> = preds
            .iter()
            .map(|(l, p)| {
                let d = p.data().iter().zip(truth.data()).map(|(a, b)| a - b).collect();
                Ok((l.clone(), Tensor::new(truth.shape().to_vec(), d)?))
            })
            .collect::<Result<_, Error>>()?;
        let diff_refs: Vec<(&str, &Tensor)> = diffs.iter().map(|(l, t)| (l.as_str(), t)).collect();
        let drange = symmetric_range(&diffs.iter().map(|(_, t)| t).collect::<Vec<_>>());
        render_panel(&diff_refs, drange, &ColorMap::diverging(), &common.out.join(image_name(&variable, "matrix", "difference")))?;
    }
    if table.any_failed() {
        return Err(Failure::new(EXIT_CELL_FAILURE, "one or more matrix cells failed; see results.csv"));
    }
    Ok(())
}

pub fn render(checkpoint: &Path, data: &Path, split: &str, index: usize, out: &Path) -> Outcome {
    let split = parse_split(split)?;
    let ckpt = Checkpoint::<f64>::load(checkpoint)?;
    let ds = load_dataset(data)?;
    let pairs = ds.split(split);
    let pair = pairs
        .get(index)
        .ok_or_else(|| Failure::new(EXIT_CONFIG, format!("{split} split has {} samples, index {index} is out of range", pairs.len())))?;
    let method = ckpt.meta.iter().find(|(k, _)| k == "method").map(|(_, v)| v.clone()).unwrap_or_else(|| "model".into());
    let variable = ds.spec.variable.to_string();
    let truth = pair.target.clone().reshape(vec![1, 1, pair.target.shape()[1], pair.target.shape()[2]])?;
    let input = predictand_plane(pair)?;
    let pred = predict_pair(&ckpt, pair)?;
    let diff = Tensor::new(truth.shape().to_vec(), pred.data().iter().zip(truth.data()).map(|(a, b)| a - b).collect())?;
    let range = shared_range(&[&truth, &input]);
    let seq = ColorMap::sequential();
    render_heatmap(&truth, range, &seq, &out.join(image_name(&variable, &method, "truth")))?;
    render_heatmap(&input, range, &seq, &out.join(image_name(&variable, &method, "input")))?;
    render_heatmap(&pred, range, &seq, &out.join(image_name(&variable, &method, "prediction")))?;
    render_heatmap(&diff, symmetric_range(&[&diff]), &ColorMap::diverging(), &out.join(image_name(&variable, &method, "difference")))?;
    let manifest = format!(
        "# downscale-lab {}\n# command: {}\ncheckpoint = {}\ndata = {}\nsplit = {split}\nindex = {index}\n",
        env!("CARGO_PKG_VERSION"),
        command_line(),
        checkpoint.display(),
        data.display()
    );
    write(&out.join(MANIFEST_FILE), &manifest)?;
    println!("rendered {variable} {method} sample {index} into {}", out.display());
    Ok(())
}

pub fn check() -> Outcome {
    let start = Instant::now();
    let results = run_checks();
    let mut failed = 0;
    for r in &results {
        println!("{} {} ({:.2}s) {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.seconds, r.detail);
        failed += usize::from(!r.passed);
    }
    println!("{} checks, {failed} failed, {:.1}s", results.len(), start.elapsed().as_secs_f64());
    if failed > 0 {
        return Err(Failure::new(EXIT_CHECK_FAILURE, format!("{failed} self-check(s) failed")));
    }
    Ok(())
}
