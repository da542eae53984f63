//! Synthetic paired coarse/fine climate-like data.
//!
//! Two regimes: a balanced, narrow-range temperature-like variable and a
//! zero-inflated, heavy-tailed precipitation-like variable. Each sample pairs
//! a fine-grid truth with a network input made of the coarsened-then-regridded
//! truth plus auxiliary channels.

mod field;
mod io;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::parse;
use crate::tensor::Tensor;

pub use field::{coarsen, regrid_bilinear, SpectralGenerator};
pub use io::{dataset_from_bytes, dataset_to_bytes, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};

/// Spectral slope shared by every generated field.
pub const AMPLITUDE_EXPONENT: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variable {
    PrecipitationLike,
    TemperatureLike,
    /// Temperature-like fields rescaled to a small standard deviation.
    TemperatureLowRange,
}

impl Variable {
    pub fn input_channels(self) -> usize {
        self.channel_order().len() + 1
    }

    /// Auxiliary channels after the predictand, in input order.
    pub fn channel_order(self) -> &'static [AuxKind] {
        match self {
            Variable::PrecipitationLike => {
                &[AuxKind::ElevationFine, AuxKind::ElevationCoarse, AuxKind::UWind, AuxKind::VWind, AuxKind::Humidity]
            }
            _ => &[AuxKind::ElevationFine, AuxKind::ElevationCoarse],
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variable::PrecipitationLike => "precipitation_like",
            Variable::TemperatureLike => "temperature_like",
            Variable::TemperatureLowRange => "temperature_low_range",
        })
    }
}

impl FromStr for Variable {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "precipitation_like" => Ok(Variable::PrecipitationLike),
            "temperature_like" => Ok(Variable::TemperatureLike),
            "temperature_low_range" => Ok(Variable::TemperatureLowRange),
            o => Err(Error::Config(format!(
                "unknown variable `{o}` (precipitation_like|temperature_like|temperature_low_range)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AuxKind {
    ElevationFine,
    ElevationCoarse,
    UWind,
    VWind,
    Humidity,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FieldKind {
    Precipitation,
    Temperature,
    Auxiliary(AuxKind),
}

/// One 2-D field, stored as `1 x 1 x H x W`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClimateField {
    pub grid: Tensor<f64>,
    pub kind: FieldKind,
    pub units: &'static str,
}

/// Network input (`C x H x W`) and fine-grid truth (`1 x H x W`).
#[derive(Clone, Debug, PartialEq)]
pub struct SamplePair {
    pub input: Tensor<f64>,
    pub target: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetSpec {
    pub variable: Variable,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub height: usize,
    pub width: usize,
    pub coarsen_factor: usize,
    pub seed: u64,
    /// Precipitation: `max(0, exp(a*g + b) - c)` of a unit-variance field `g`.
    pub precip_a: f64,
    pub precip_b: f64,
    pub precip_c: f64,
    pub temp_mean: f64,
    pub temp_std: f64,
    /// Temperature change per elevation unit.
    pub lapse_rate: f64,
    pub elevation_mean: f64,
    pub elevation_std: f64,
    /// Target standard deviation of the low-range temperature variant.
    pub low_range_std: f64,
}

impl DatasetSpec {
    /// 64x64 grids, 256/32/64 pairs.
    pub fn desk(variable: Variable, seed: u64) -> Self {
        DatasetSpec {
            variable,
            n_train: 256,
            n_val: 32,
            n_test: 64,
            height: 64,
            width: 64,
            coarsen_factor: 8,
            seed,
            precip_a: 4.5,
            precip_b: 0.5655,
            precip_c: 1.0,
            temp_mean: 10.0,
            temp_std: 8.0,
            lapse_rate: -6.5e-3,
            elevation_mean: 1500.0,
            elevation_std: 800.0,
            low_range_std: 0.05,
        }
    }

    /// 32x32 grids with 8x8 coarse cells, 128/32/128 pairs. Squared error on
    /// precipitation hinges on a few tail pixels, so the test split is large.
    pub fn quick(variable: Variable, seed: u64) -> Self {
        DatasetSpec {
            n_train: 128,
            n_val: 32,
            n_test: 128,
            height: 32,
            width: 32,
            coarsen_factor: 4,
            ..Self::desk(variable, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_train == 0 || self.n_val == 0 || self.n_test == 0 {
            return bad("split sizes must be positive".into());
        }
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return bad(format!("grid {}x{} must be positive and divisible by 8", self.height, self.width));
        }
        let f = self.coarsen_factor;
        if f == 0 || self.height % f != 0 || self.width % f != 0 || self.height / f < 2 || self.width / f < 2 {
            return bad(format!("coarsen factor {f} must divide the grid and leave at least 2x2 coarse cells"));
        }
        if !(self.temp_std > 0.0) || !(self.low_range_std > 0.0) || !(self.elevation_std >= 0.0) {
            return bad("standard deviations must be positive".into());
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let kv = |k: &str, v: String| (k.to_string(), v);
        vec![
            kv("variable", self.variable.to_string()),
            kv("n_train", self.n_train.to_string()),
            kv("n_val", self.n_val.to_string()),
            kv("n_test", self.n_test.to_string()),
            kv("height", self.height.to_string()),
            kv("width", self.width.to_string()),
            kv("coarsen_factor", self.coarsen_factor.to_string()),
            kv("seed", self.seed.to_string()),
            kv("precip_a", self.precip_a.to_string()),
            kv("precip_b", self.precip_b.to_string()),
            kv("precip_c", self.precip_c.to_string()),
            kv("temp_mean", self.temp_mean.to_string()),
            kv("temp_std", self.temp_std.to_string()),
            kv("lapse_rate", self.lapse_rate.to_string()),
            kv("elevation_mean", self.elevation_mean.to_string()),
            kv("elevation_std", self.elevation_std.to_string()),
            kv("low_range_std", self.low_range_std.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "variable" => self.variable = value.trim().parse()?,
            "n_train" => self.n_train = parse(key, value)?,
            "n_val" => self.n_val = parse(key, value)?,
            "n_test" => self.n_test = parse(key, value)?,
            "height" => self.height = parse(key, value)?,
            "width" => self.width = parse(key, value)?,
            "coarsen_factor" => self.coarsen_factor = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "precip_a" => self.precip_a = parse(key, value)?,
            "precip_b" => self.precip_b = parse(key, value)?,
            "precip_c" => self.precip_c = parse(key, value)?,
            "temp_mean" => self.temp_mean = parse(key, value)?,
            "temp_std" => self.temp_std = parse(key, value)?,
            "lapse_rate" => self.lapse_rate = parse(key, value)?,
            "elevation_mean" => self.elevation_mean = parse(key, value)?,
            "elevation_std" => self.elevation_std = parse(key, value)?,
            "low_range_std" => self.low_range_std = parse(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}` (train | val | test)"))),
        }
    }
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for a named sub-stream.
pub fn derive_seed(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |h, &p| splitmix64(h ^ splitmix64(p)))
}

const STREAM_ELEVATION: u64 = 0xe1e7;
const STREAM_CALIBRATION: u64 = 0xca1b;

fn as_field(data: Vec<f64>, h: usize, w: usize, kind: FieldKind, units: &'static str) -> ClimateField {
    ClimateField { grid: Tensor::new(vec![1, 1, h, w], data).expect("grid size"), kind, units }
}

/// Rescales to exact sample mean `mean` and standard deviation `std`.
fn standardize(v: &mut [f64], mean: f64, std: f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let s = (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n).sqrt();
    v.iter_mut().for_each(|x| *x = (*x - m) / s * std + mean);
}

/// The static elevation field shared by every sample of a dataset.
pub fn gen_elevation(spec: &DatasetSpec) -> Result<ClimateField> {
    let g = SpectralGenerator::new(spec.height, spec.width, AMPLITUDE_EXPONENT)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[STREAM_ELEVATION]));
    let mut v = g.sample(&mut rng);
    standardize(&mut v, spec.elevation_mean, spec.elevation_std);
    v.iter_mut().for_each(|x| *x = x.max(0.0));
    Ok(as_field(v, spec.height, spec.width, FieldKind::Auxiliary(AuxKind::ElevationFine), "m"))
}

fn sample_rng(spec: &DatasetSpec, split: Split, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[split.tag(), index as u64]))
}

/// Smooth fields with sample mean `temp_mean` and standard deviation
/// `temp_std`, plus the elevation lapse term.
pub fn gen_temperature_like(spec: &DatasetSpec, split: Split, count: usize) -> Result<Vec<ClimateField>> {
    let g = SpectralGenerator::new(spec.height, spec.width, AMPLITUDE_EXPONENT)?;
    let elevation = gen_elevation(spec)?;
    Ok((0..count)
        .map(|i| {
            let mut v = g.sample(&mut sample_rng(spec, split, i));
            standardize(&mut v, spec.temp_mean, spec.temp_std);
            for (x, e) in v.iter_mut().zip(elevation.grid.data()) {
                *x += spec.lapse_rate * e;
            }
            as_field(v, spec.height, spec.width, FieldKind::Temperature, "degC")
        })
        .collect())
}

/// `max(0, exp(a*g + b) - c)` of the field standardized to mean 0, std 1.
/// Smooth fields hold only a few independent blobs, so their sample variance
/// swings widely; standardizing keeps the pixel marginal, and with it the
/// zero fraction and the tail, the same for every field.
fn precipitation_from(mut g: Vec<f64>, spec: &DatasetSpec) -> Vec<f64> {
    standardize(&mut g, 0.0, 1.0);
    g.iter().map(|&x| ((spec.precip_a * x + spec.precip_b).exp() - spec.precip_c).max(0.0)).collect()
}

/// Pooled distribution statistics of precipitation-like fields.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrecipStats {
    pub zero_fraction: f64,
    /// 99.9th percentile over the mean of the nonzero values.
    pub tail_ratio: f64,
}

pub fn precip_stats<'a>(fields: impl IntoIterator<Item = &'a Tensor<f64>>) -> PrecipStats {
    let mut all: Vec<f64> = fields.into_iter().flat_map(|t| t.data().iter().copied()).collect();
    let zeros = all.iter().filter(|&&v| v == 0.0).count();
    let nonzero: Vec<f64> = all.iter().copied().filter(|&v| v != 0.0).collect();
    let mean_nz = if nonzero.is_empty() { 0.0 } else { nonzero.iter().sum::<f64>() / nonzero.len() as f64 };
    all.sort_by(f64::total_cmp);
    let q = quantile_sorted(&all, 0.999);
    PrecipStats {
        zero_fraction: zeros as f64 / all.len().max(1) as f64,
        tail_ratio: if mean_nz > 0.0 { q / mean_nz } else { 0.0 },
    }
}

/// Linear-interpolated quantile of sorted data.
pub fn quantile_sorted(v: &[f64], q: f64) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let pos = q * (v.len() - 1) as f64;
    let i = pos.floor() as usize;
    let t = pos - i as f64;
    if i + 1 < v.len() {
        v[i] + (v[i + 1] - v[i]) * t
    } else {
        v[i]
    }
}

pub const ZERO_FRACTION_BAND: (f64, f64) = (0.40, 0.70);
pub const MIN_TAIL_RATIO: f64 = 50.0;
const CALIBRATION_FIELDS: usize = 1000;
const CALIBRATION_GRID: usize = 64;

/// Audits the precipitation parameters on a fixed sample of 1000 fields of
/// 64x64 (the pixel marginal barely depends on grid size) and fails if the
/// zero fraction or tail targets are missed.
pub fn check_precip_calibration(spec: &DatasetSpec) -> Result<PrecipStats> {
    let n = CALIBRATION_GRID;
    let g = SpectralGenerator::new(n, n, AMPLITUDE_EXPONENT)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[STREAM_CALIBRATION]));
    let fields: Vec<Tensor<f64>> = (0..CALIBRATION_FIELDS)
        .map(|_| Tensor::new(vec![n, n], precipitation_from(g.sample(&mut rng), spec)).unwrap())
        .collect();
    let stats = precip_stats(&fields);
    let (lo, hi) = ZERO_FRACTION_BAND;
    if !(lo..=hi).contains(&stats.zero_fraction) {
        return Err(Error::Calibration(format!(
            "zero fraction {:.3} outside [{lo}, {hi}] for a={}, b={}, c={}",
            stats.zero_fraction, spec.precip_a, spec.precip_b, spec.precip_c
        )));
    }
    if !(stats.tail_ratio > MIN_TAIL_RATIO) {
        return Err(Error::Calibration(format!(
            "tail ratio {:.1} does not exceed {MIN_TAIL_RATIO}",
            stats.tail_ratio
        )));
    }
    Ok(stats)
}

/// Zero-inflated heavy-tailed fields. Fails with a calibration error when
/// the parameters miss the distribution targets.
pub fn gen_precipitation_like(spec: &DatasetSpec, split: Split, count: usize) -> Result<Vec<ClimateField>> {
    check_precip_calibration(spec)?;
    let g = SpectralGenerator::new(spec.height, spec.width, AMPLITUDE_EXPONENT)?;
    Ok((0..count)
        .map(|i| {
            let v = precipitation_from(g.sample(&mut sample_rng(spec, split, i)), spec);
            as_field(v, spec.height, spec.width, FieldKind::Precipitation, "mm/day")
        })
        .collect())
}

/// Per-sample auxiliaries in channel order for `spec.variable`.
pub fn gen_auxiliaries(spec: &DatasetSpec, split: Split, count: usize) -> Result<Vec<Vec<ClimateField>>> {
    let (h, w) = (spec.height, spec.width);
    let g = SpectralGenerator::new(h, w, AMPLITUDE_EXPONENT)?;
    let elevation = gen_elevation(spec)?;
    let mut coarse = elevation.clone();
    coarse.grid = regrid_bilinear(&coarsen(&elevation.grid, spec.coarsen_factor)?, h, w)?;
    coarse.kind = FieldKind::Auxiliary(AuxKind::ElevationCoarse);
    Ok((0..count)
        .map(|i| {
            // separate from the predictand stream of the same sample
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[split.tag(), i as u64, 0xa0c]));
            spec.variable
                .channel_order()
                .iter()
                .map(|&kind| match kind {
                    AuxKind::ElevationFine => elevation.clone(),
                    AuxKind::ElevationCoarse => coarse.clone(),
                    AuxKind::UWind | AuxKind::VWind => {
                        let v = g.sample(&mut rng).into_iter().map(|x| 5.0 * x).collect();
                        as_field(v, h, w, FieldKind::Auxiliary(kind), "m/s")
                    }
                    AuxKind::Humidity => {
                        let v = g.sample(&mut rng).into_iter().map(|x| (60.0 + 15.0 * x).clamp(0.0, 100.0)).collect();
                        as_field(v, h, w, FieldKind::Auxiliary(kind), "%")
                    }
                })
                .collect()
        })
        .collect())
}

/// Builds input/target pairs: input channel 0 is the truth coarsened by
/// `spec.coarsen_factor` and regridded back; auxiliaries follow in the fixed
/// channel order.
pub fn assemble_pairs(fine: &[ClimateField], aux: &[Vec<ClimateField>], spec: &DatasetSpec) -> Result<Vec<SamplePair>> {
    if fine.len() != aux.len() {
        return Err(Error::shape("assemble_pairs", format!("{} targets but {} auxiliary sets", fine.len(), aux.len())));
    }
    let order = spec.variable.channel_order();
    let (h, w) = (spec.height, spec.width);
    fine.iter()
        .zip(aux)
        .map(|(truth, extras)| {
            let kinds: Vec<FieldKind> = extras.iter().map(|f| f.kind).collect();
            let expected: Vec<FieldKind> = order.iter().map(|&k| FieldKind::Auxiliary(k)).collect();
            if kinds != expected {
                return Err(Error::Config(format!("channel order violation: got {kinds:?}, expected {expected:?}")));
            }
            if truth.grid.shape() != [1, 1, h, w] || extras.iter().any(|f| f.grid.shape() != [1, 1, h, w]) {
                return Err(Error::shape("assemble_pairs", format!("fields must be 1x1x{h}x{w}")));
            }
            let low = regrid_bilinear(&coarsen(&truth.grid, spec.coarsen_factor)?, h, w)?;
            let mut data = low.into_data();
            for f in extras {
                data.extend_from_slice(f.grid.data());
            }
            Ok(SamplePair {
                input: Tensor::new(vec![1 + extras.len(), h, w], data)?,
                target: truth.grid.clone().reshape(vec![1, h, w])?,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub spec: DatasetSpec,
    pub train: Vec<SamplePair>,
    pub val: Vec<SamplePair>,
    pub test: Vec<SamplePair>,
}

impl Dataset {
    pub fn split(&self, s: Split) -> &[SamplePair] {
        match s {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

fn predictand_fields(spec: &DatasetSpec, split: Split, n: usize) -> Result<Vec<ClimateField>> {
    match spec.variable {
        Variable::PrecipitationLike => gen_precipitation_like(spec, split, n),
        _ => gen_temperature_like(spec, split, n),
    }
}

/// Generates all three splits. For the low-range variant every target (and
/// the matching input channel) is multiplied by one factor that brings the
/// pooled training-target standard deviation to `low_range_std`.
pub fn generate_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut fields = Vec::with_capacity(3);
    for s in Split::ALL {
        let n = match s {
            Split::Train => spec.n_train,
            Split::Val => spec.n_val,
            Split::Test => spec.n_test,
        };
        fields.push((predictand_fields(spec, s, n)?, gen_auxiliaries(spec, s, n)?));
    }
    if spec.variable == Variable::TemperatureLowRange {
        let train: Vec<f64> = fields[0].0.iter().flat_map(|f| f.grid.data().iter().copied()).collect();
        let n = train.len() as f64;
        let mean = train.iter().sum::<f64>() / n;
        let std = (train.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
        let k = spec.low_range_std / std;
        for (targets, _) in &mut fields {
            for f in targets.iter_mut() {
                f.grid = f.grid.map(|x| x * k);
            }
        }
    }
    let mut pairs = fields.into_iter().map(|(t, a)| assemble_pairs(&t, &a, spec));
    Ok(Dataset {
        spec: spec.clone(),
        train: pairs.next().unwrap()?,
        val: pairs.next().unwrap()?,
        test: pairs.next().unwrap()?,
    })
}

#[cfg(test)]
mod tests;
