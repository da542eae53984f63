//! Training loop, evaluation and experiment settings.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::adam::{Adam, AdamConfig, ParamGrad};
use crate::checkpoint::Checkpoint;
use crate::data::{derive_seed, Dataset, SamplePair};
use crate::error::{Error, Result};
use crate::losses::{loss, LossKind, MetricsAccumulator, MetricsReport};
use crate::model::{build_unet, parse, Model, UNetConfig};
use crate::preprocessing::{GammaMode, GammaPlacement, GammaTransform, Pipeline};
use crate::scalar::Scalar;
use crate::tensor::{NormMode, Tape, Tensor};

const STREAM_MODEL: u64 = 0x30de1;
const STREAM_SHUFFLE: u64 = 0x5a0f;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl TrainConfig {
    pub fn desk(seed: u64) -> Self {
        TrainConfig { epochs: 60, batch_size: 8, adam: AdamConfig::default(), seed }
    }

    /// The full-size schedule (800 epochs).
    pub fn full(seed: u64) -> Self {
        TrainConfig { epochs: 800, ..Self::desk(seed) }
    }

    /// With the quick dataset this takes as many optimizer steps as desk.
    pub fn quick(seed: u64) -> Self {
        TrainConfig { epochs: 120, ..Self::desk(seed) }
    }
}

/// One cell of the experiment matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub loss: LossKind,
    pub preproc: GammaMode,
    /// Gamma of the fixed-transform cells.
    pub fixed_gamma: f64,
    /// Starting gamma of the learnable cells.
    pub initial_gamma: f64,
    pub placement: GammaPlacement,
    pub model: UNetConfig,
    pub train: TrainConfig,
}

impl ExperimentSpec {
    pub fn new(loss: LossKind, preproc: GammaMode, model: UNetConfig, train: TrainConfig) -> Self {
        ExperimentSpec {
            loss,
            preproc,
            fixed_gamma: 2.2,
            initial_gamma: 1.0,
            placement: GammaPlacement::InputAndTarget,
            model,
            train,
        }
    }

    /// Row label: `L1`, `L2+NL2.2`, `L1+Learn`, ...
    pub fn label(&self) -> String {
        match self.preproc {
            GammaMode::None => self.loss.to_string(),
            GammaMode::Fixed => format!("{}+NL{}", self.loss, self.fixed_gamma),
            GammaMode::Learnable => format!("{}+Learn", self.loss),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.epochs == 0 || self.train.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.train.adam.lr > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        self.model.validate()
    }

    fn gamma_transform<T: Scalar>(&self) -> Result<GammaTransform<T>> {
        let channels = vec![0];
        match self.preproc {
            GammaMode::None => Ok(GammaTransform::identity(channels)),
            GammaMode::Fixed => GammaTransform::fixed(T::lit(self.fixed_gamma), channels),
            GammaMode::Learnable => GammaTransform::learnable(T::lit(self.initial_gamma), channels),
        }
    }

    /// Experiment and optimizer settings as `key=value` pairs.
    pub fn to_kv(&self) -> Vec<(String, String)> {
        let a = &self.train.adam;
        vec![
            ("loss".into(), self.loss.to_string()),
            ("preproc".into(), self.preproc.to_string()),
            ("fixed_gamma".into(), self.fixed_gamma.to_string()),
            ("initial_gamma".into(), self.initial_gamma.to_string()),
            ("placement".into(), self.placement.to_string()),
            ("epochs".into(), self.train.epochs.to_string()),
            ("batch_size".into(), self.train.batch_size.to_string()),
            ("lr".into(), a.lr.to_string()),
            ("beta1".into(), a.beta1.to_string()),
            ("beta2".into(), a.beta2.to_string()),
            ("eps".into(), a.eps.to_string()),
            ("seed".into(), self.train.seed.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "loss" => self.loss = v.parse()?,
            "preproc" => self.preproc = v.parse()?,
            "fixed_gamma" => self.fixed_gamma = parse(key, v)?,
            "initial_gamma" => self.initial_gamma = parse(key, v)?,
            "placement" => self.placement = v.parse()?,
            "epochs" => self.train.epochs = parse(key, v)?,
            "batch_size" => self.train.batch_size = parse(key, v)?,
            "lr" => self.train.adam.lr = parse(key, v)?,
            "beta1" => self.train.adam.beta1 = parse(key, v)?,
            "beta2" => self.train.adam.beta2 = parse(key, v)?,
            "eps" => self.train.adam.eps = parse(key, v)?,
            "seed" => self.train.seed = parse(key, v)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training-batch loss over the epoch.
    pub train_loss: f64,
    pub val: MetricsReport,
    /// Gamma after the epoch (1 when no transform is used).
    pub gamma: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose weights were retained.
    pub best_epoch: usize,
}

impl TrainHistory {
    pub fn gamma_trajectory(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.gamma).collect()
    }

    /// Equality ignoring wall-clock time.
    pub fn same_results(&self, other: &TrainHistory) -> bool {
        let strip = |h: &TrainHistory| {
            h.epochs.iter().map(|e| EpochRecord { wall_seconds: 0.0, ..e.clone() }).collect::<Vec<_>>()
        };
        self.best_epoch == other.best_epoch && strip(self) == strip(other)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_avg_abs_diff,val_avg_mse,gamma,wall_seconds\n");
        for e in &self.epochs {
            s += &format!(
                "{},{},{},{},{},{:.3}\n",
                e.epoch, e.train_loss, e.val.avg_abs_diff, e.val.avg_mse, e.gamma, e.wall_seconds
            );
        }
        s
    }
}

pub struct TrainOutcome<T> {
    /// Weights and pipeline from the best validation epoch.
    pub best: Checkpoint<T>,
    pub history: TrainHistory,
    /// Gamma at the end of training.
    pub final_gamma: f64,
}

/// Per-epoch progress callback.
pub type Progress<'a> = &'a mut dyn FnMut(&EpochRecord);

fn batch<T: Scalar>(pairs: &[&SamplePair], target: bool) -> Result<Tensor<T>> {
    let items: Vec<Tensor<T>> = pairs.iter().map(|p| if target { p.target.cast() } else { p.input.cast() }).collect();
    let refs: Vec<&Tensor<T>> = items.iter().collect();
    Tensor::stack(&refs, false)
}

/// Eval-mode metrics over `pairs`, in physical units and in transformed space.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    pipeline: &Pipeline<T>,
    pairs: &[SamplePair],
    batch_size: usize,
) -> Result<MetricsReport> {
    let mut acc = MetricsAccumulator::default();
    let all: Vec<&SamplePair> = pairs.iter().collect();
    for chunk in all.chunks(batch_size.max(1)) {
        let x = batch::<T>(chunk, false)?;
        let y = batch::<T>(chunk, true)?;
        let out = model.predict(&pipeline.input_values(&x)?)?;
        let (transformed, physical) = pipeline.output_values(&out)?;
        acc.add(&physical, &y, &transformed, &pipeline.target_transformed(&y))?;
    }
    acc.finish()
}

/// Physical-unit prediction (`1 x 1 x H x W`) for one sample.
pub fn predict_pair<T: Scalar>(ckpt: &Checkpoint<T>, pair: &SamplePair) -> Result<Tensor<T>> {
    let x = batch::<T>(&[pair], false)?;
    let out = ckpt.model.predict(&ckpt.pipeline.input_values(&x)?)?;
    Ok(ckpt.pipeline.output_values(&out)?.1)
}

pub fn evaluate_checkpoint<T: Scalar>(ckpt: &Checkpoint<T>, pairs: &[SamplePair], batch_size: usize) -> Result<MetricsReport> {
    evaluate(&ckpt.model, &ckpt.pipeline, pairs, batch_size)
}

/// Trains one cell. Deterministic given `spec` and `data`.
pub fn train<T: Scalar>(spec: &ExperimentSpec, data: &Dataset, mut progress: Option<Progress<'_>>) -> Result<TrainOutcome<T>> {
    spec.validate()?;
    let channels = data.train.first().map(|p| p.input.shape()[0]).ok_or_else(|| Error::Empty("training split".into()))?;
    if channels != spec.model.in_channels {
        return Err(Error::Config(format!(
            "model expects {} input channels but the dataset has {channels}",
            spec.model.in_channels
        )));
    }
    let seed = spec.train.seed;
    let inputs: Vec<Tensor<T>> = data.train.iter().map(|p| p.input.cast()).collect();
    let targets: Vec<Tensor<T>> = data.train.iter().map(|p| p.target.cast()).collect();
    let (input_refs, target_refs): (Vec<&Tensor<T>>, Vec<&Tensor<T>>) = (inputs.iter().collect(), targets.iter().collect());
    let mut pipeline = Pipeline::fit(spec.gamma_transform()?, spec.placement, &input_refs, &target_refs)?;
    let mut model: Model<T> = build_unet(&spec.model, derive_seed(seed, &[STREAM_MODEL]))?;
    let mut adam = Adam::new(spec.train.adam);
    let learnable = pipeline.gamma.is_learnable();
    let mut history = TrainHistory::default();
    let mut best: Option<(f64, Checkpoint<T>)> = None;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let meta = |epoch: usize| {
        vec![
            ("method".to_string(), spec.label()),
            ("seed".to_string(), seed.to_string()),
            ("epoch".to_string(), epoch.to_string()),
        ]
    };

    for epoch in 1..=spec.train.epochs {
        let start = Instant::now();
        if learnable && epoch > 1 {
            // Normalizers follow the current gamma so they keep describing
            // what the network sees; within an epoch they stay fixed.
            pipeline = Pipeline::fit(pipeline.gamma.clone(), spec.placement, &input_refs, &target_refs)?;
        }
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[STREAM_SHUFFLE, epoch as u64])));
        let (mut loss_sum, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(spec.train.batch_size) {
            let pairs: Vec<&SamplePair> = chunk.iter().map(|&i| &data.train[i]).collect();
            let mut tape = Tape::new();
            let theta = learnable.then(|| tape.param(Tensor::scalar(pipeline.gamma.theta())));
            let x = tape.constant(batch(&pairs, false)?);
            let y = tape.constant(batch(&pairs, true)?);
            let xin = pipeline.input_on_tape(&mut tape, x, theta)?;
            let (pred, vars) = model.forward_on_tape(&mut tape, xin, NormMode::Train, true)?;
            let yt = pipeline.target_on_tape(&mut tape, y, theta)?;
            let l = loss(spec.loss, &mut tape, pred, yt)?;
            let lv = tape.value(l).item().expect("scalar loss").to_f64_lossy();
            if !lv.is_finite() {
                return Err(Error::Divergence { epoch, detail: format!("training loss became {lv}") });
            }
            tape.backward(l)?;
            let grads: Vec<Vec<T>> = vars
                .iter()
                .zip(model.params())
                .map(|(v, p)| tape.grad(*v).map(<[T]>::to_vec).unwrap_or_else(|| vec![T::zero(); p.value.numel()]))
                .collect();
            let theta_grad: Vec<T> = theta.and_then(|t| tape.grad(t).map(<[T]>::to_vec)).unwrap_or_else(|| vec![T::zero()]);
            drop(tape);
            let mut theta_val = [pipeline.gamma.theta()];
            let mut list: Vec<ParamGrad<'_, T>> = model
                .params_mut()
                .iter_mut()
                .zip(&grads)
                .map(|(p, g)| ParamGrad { name: &p.name, value: p.value.data_mut(), grad: g })
                .collect();
            if learnable {
                list.push(ParamGrad { name: "gamma.theta", value: &mut theta_val, grad: &theta_grad });
            }
            adam.step(&mut list)?;
            if learnable {
                pipeline.gamma.set_theta(theta_val[0]);
            }
            loss_sum += lv;
            batches += 1;
        }
        let val = evaluate(&model, &pipeline, &data.val, spec.train.batch_size)?;
        let score = val.matching(spec.loss);
        if !score.is_finite() {
            return Err(Error::Divergence { epoch, detail: format!("validation score became {score}") });
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / batches as f64,
            val,
            gamma: pipeline.gamma.gamma().to_f64_lossy(),
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        if let Some(cb) = progress.as_mut() {
            cb(&record);
        }
        history.epochs.push(record);
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            history.best_epoch = epoch;
            best = Some((score, Checkpoint { model: model.clone(), pipeline: pipeline.clone(), meta: meta(epoch) }));
        }
    }
    Ok(TrainOutcome {
        best: best.expect("at least one epoch").1,
        history,
        final_gamma: pipeline.gamma.gamma().to_f64_lossy(),
    })
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch {:>4}  loss {:.6}  val abs {:.6}  val mse {:.6}  gamma {:.4}  ({:.1}s)",
            self.epoch, self.train_loss, self.val.avg_abs_diff, self.val.avg_mse, self.gamma, self.wall_seconds
        )
    }
}
