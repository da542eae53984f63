//! Three-level UNet used as the downscaling network.
//!
//! Encoder group `g` is a stride-2 conv block followed by a stride-1 conv
//! block (conv + batch norm + ReLU each). Decoder group `g` is a nearest 2x
//! upsample + stride-1 conv block, then a stride-1 conv block; the very last
//! block has neither batch norm nor ReLU.
//!
//! Skip link `g` takes the activation that enters encoder group `g` (the raw
//! input for `g = 1`) and merges it into the decoder at the same resolution,
//! right after that level's upsampling block.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{BatchNormState, NormMode, Tape, Tensor, Var};

/// Parameter budget of the full-size reference network.
pub const FULL_PARAMETER_TARGET: usize = 7_500_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SkipMode {
    Concat,
    Add,
}

impl fmt::Display for SkipMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SkipMode::Concat => "concat",
            SkipMode::Add => "add",
        })
    }
}

impl FromStr for SkipMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(SkipMode::Concat),
            "add" => Ok(SkipMode::Add),
            o => Err(Error::Config(format!("unknown skip mode `{o}` (concat|add)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Channels after the first encoder group is `base_width * width_multipliers[0]`.
    pub base_width: usize,
    pub width_multipliers: [usize; 3],
    pub kernel_size: usize,
    /// Encoder groups (1..=3) whose input is linked into the decoder.
    pub skip_links: BTreeSet<usize>,
    pub skip_mode: SkipMode,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl UNetConfig {
    fn with_base(in_channels: usize, base_width: usize) -> Self {
        UNetConfig {
            in_channels,
            out_channels: 1,
            base_width,
            width_multipliers: [1, 2, 4],
            kernel_size: 3,
            skip_links: [2, 3].into_iter().collect(),
            skip_mode: SkipMode::Concat,
            bn_momentum: 0.1,
            bn_epsilon: 1e-5,
        }
    }

    /// Desk-scale network (~0.48M parameters for 6 input channels).
    pub fn desk(in_channels: usize) -> Self {
        Self::with_base(in_channels, 32)
    }

    /// Small network for fast experiment sweeps.
    pub fn quick(in_channels: usize) -> Self {
        Self::with_base(in_channels, 8)
    }

    /// Full-size network: the base width whose parameter count lies closest
    /// to [`FULL_PARAMETER_TARGET`].
    pub fn full(in_channels: usize) -> Self {
        let base = (1..=512)
            .min_by_key(|&b| parameter_count(&Self::with_base(in_channels, b)).abs_diff(FULL_PARAMETER_TARGET))
            .expect("non-empty sweep");
        Self::with_base(in_channels, base)
    }

    pub fn widths(&self) -> [usize; 3] {
        self.width_multipliers.map(|m| m * self.base_width)
    }

    fn skip_width(&self, group: usize) -> usize {
        match group {
            1 => self.in_channels,
            2 => self.widths()[0],
            _ => self.widths()[1],
        }
    }

    /// Structural checks shared by every builder.
    fn validate_structure(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.in_channels == 0 || self.out_channels == 0 || self.base_width == 0 {
            return bad("channel counts and base width must be positive".into());
        }
        if self.width_multipliers.contains(&0) {
            return bad("width multipliers must be positive".into());
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel size must be odd, got {}", self.kernel_size));
        }
        if let Some(g) = self.skip_links.iter().find(|g| !(1..=3).contains(*g)) {
            return bad(format!("skip link {g} does not name an encoder group (1..=3)"));
        }
        if self.skip_mode == SkipMode::Add {
            let w = self.widths();
            let dec_widths = [w[0], w[0], w[1]];
            for &g in &self.skip_links {
                if self.skip_width(g) != dec_widths[g - 1] {
                    return bad(format!(
                        "additive skip {g} joins {} channels into {} channels",
                        self.skip_width(g),
                        dec_widths[g - 1]
                    ));
                }
            }
        }
        if !(self.bn_epsilon > 0.0) {
            return bad("batch-norm epsilon must be positive".into());
        }
        Ok(())
    }

    /// Full validation, including the two-skip-link architecture.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        if self.skip_links.len() != 2 {
            return Err(Error::Config(format!(
                "the network uses exactly two skip links, got {:?}",
                self.skip_links
            )));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> Vec<(String, String)> {
        let m = self.width_multipliers;
        vec![
            ("in_channels".into(), self.in_channels.to_string()),
            ("out_channels".into(), self.out_channels.to_string()),
            ("base_width".into(), self.base_width.to_string()),
            ("width_multipliers".into(), format!("{},{},{}", m[0], m[1], m[2])),
            ("kernel_size".into(), self.kernel_size.to_string()),
            ("skip_links".into(), join(self.skip_links.iter())),
            ("skip_mode".into(), self.skip_mode.to_string()),
            ("bn_momentum".into(), self.bn_momentum.to_string()),
            ("bn_epsilon".into(), self.bn_epsilon.to_string()),
        ]
    }

    /// Applies one `key = value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "in_channels" => self.in_channels = parse(key, value)?,
            "out_channels" => self.out_channels = parse(key, value)?,
            "base_width" => self.base_width = parse(key, value)?,
            "width_multipliers" => {
                let v: Vec<usize> = parse_list(key, value)?;
                self.width_multipliers = v
                    .try_into()
                    .map_err(|_| Error::Config("width_multipliers needs exactly 3 entries".into()))?;
            }
            "kernel_size" => self.kernel_size = parse(key, value)?,
            "skip_links" => self.skip_links = parse_list(key, value)?.into_iter().collect(),
            "skip_mode" => self.skip_mode = value.parse()?,
            "bn_momentum" => self.bn_momentum = parse(key, value)?,
            "bn_epsilon" => self.bn_epsilon = parse(key, value)?,
            _ => return Err(Error::UnknownKey(key.to_string())),
        }
        Ok(())
    }
}

fn join<I: Iterator<Item = D>, D: ToString>(it: I) -> String {
    it.map(|d| d.to_string()).collect::<Vec<_>>().join(",")
}

pub(crate) fn parse<V: FromStr>(key: &str, value: &str) -> Result<V> {
    value.trim().parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{value}`")))
}

pub(crate) fn parse_list<V: FromStr>(key: &str, value: &str) -> Result<Vec<V>> {
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|p| parse(key, p)).collect()
}

/// Exact trainable parameter count (conv weights and biases plus batch-norm
/// scale and shift; running statistics excluded).
pub fn parameter_count(cfg: &UNetConfig) -> usize {
    let k2 = cfg.kernel_size * cfg.kernel_size;
    let conv = |cin: usize, cout: usize| cin * cout * k2 + cout;
    let bn = |c: usize| 2 * c;
    let [w1, w2, w3] = cfg.widths();
    let skip = |g: usize| match cfg.skip_mode {
        SkipMode::Concat if cfg.skip_links.contains(&g) => cfg.skip_width(g),
        _ => 0,
    };
    let encoder = conv(cfg.in_channels, w1) + conv(w1, w1) + conv(w1, w2) + conv(w2, w2) + conv(w2, w3) + conv(w3, w3)
        + 2 * bn(w1)
        + 2 * bn(w2)
        + 2 * bn(w3);
    let decoder = conv(w3, w2) + bn(w2) + conv(w2 + skip(3), w2) + bn(w2)
        + conv(w2, w1) + bn(w1) + conv(w1 + skip(2), w1) + bn(w1)
        + conv(w1, w1) + bn(w1) + conv(w1 + skip(1), cfg.out_channels);
    encoder + decoder
}

#[derive(Clone, Debug, PartialEq)]
struct ConvBlock {
    name: String,
    cin: usize,
    cout: usize,
    stride: usize,
    norm_relu: bool,
}

/// Conv blocks in execution order: 6 encoder blocks, then 6 decoder blocks
/// alternating (upsample block, merge block).
fn layout(cfg: &UNetConfig) -> Vec<ConvBlock> {
    let [w1, w2, w3] = cfg.widths();
    let merged = |g: usize, width: usize| match cfg.skip_mode {
        SkipMode::Concat if cfg.skip_links.contains(&g) => width + cfg.skip_width(g),
        _ => width,
    };
    let b = |name: &str, cin, cout, stride, norm_relu| ConvBlock { name: name.into(), cin, cout, stride, norm_relu };
    vec![
        b("enc1.down", cfg.in_channels, w1, 2, true),
        b("enc1.conv", w1, w1, 1, true),
        b("enc2.down", w1, w2, 2, true),
        b("enc2.conv", w2, w2, 1, true),
        b("enc3.down", w2, w3, 2, true),
        b("enc3.conv", w3, w3, 1, true),
        b("dec1.up", w3, w2, 1, true),
        b("dec1.conv", merged(3, w2), w2, 1, true),
        b("dec2.up", w2, w1, 1, true),
        b("dec2.conv", merged(2, w1), w1, 1, true),
        b("dec3.up", w1, w1, 1, true),
        b("dec3.conv", merged(1, w1), cfg.out_channels, 1, false),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Instantiated network: trainable tensors plus batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    cfg: UNetConfig,
    blocks: Vec<ConvBlock>,
    params: Vec<NamedTensor<T>>,
    norms: Vec<BatchNormState<T>>,
}

/// Builds the network with fan-in scaled uniform initialization.
pub fn build_unet<T: Scalar>(cfg: &UNetConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate()?;
    Ok(instantiate(cfg, seed))
}

/// Like [`build_unet`] but accepts any skip-link subset, for ablations.
pub fn build_unet_ablation<T: Scalar>(cfg: &UNetConfig, seed: u64) -> Result<Model<T>> {
    cfg.validate_structure()?;
    Ok(instantiate(cfg, seed))
}

fn instantiate<T: Scalar>(cfg: &UNetConfig, seed: u64) -> Model<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let blocks = layout(cfg);
    let k = cfg.kernel_size;
    let mut params = Vec::new();
    let mut norms = Vec::new();
    for b in &blocks {
        let bound = 1.0 / ((b.cin * k * k) as f64).sqrt();
        let mut uniform = |shape: &[usize]| Tensor::from_fn(shape, |_| T::lit(rng.gen_range(-bound..bound)));
        params.push(NamedTensor { name: format!("{}.weight", b.name), value: uniform(&[b.cout, b.cin, k, k]) });
        params.push(NamedTensor { name: format!("{}.bias", b.name), value: uniform(&[b.cout]) });
        if b.norm_relu {
            params.push(NamedTensor { name: format!("{}.bn.scale", b.name), value: Tensor::full(&[b.cout], T::one()) });
            params.push(NamedTensor { name: format!("{}.bn.shift", b.name), value: Tensor::zeros(&[b.cout]) });
            norms.push(BatchNormState::new(b.cout, T::lit(cfg.bn_momentum), T::lit(cfg.bn_epsilon)));
        }
    }
    Model { cfg: cfg.clone(), blocks, params, norms }
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn norm_states(&self) -> &[BatchNormState<T>] {
        &self.norms
    }

    pub fn norm_states_mut(&mut self) -> &mut [BatchNormState<T>] {
        &mut self.norms
    }

    /// Number of trainable scalars held by this instance.
    pub fn instantiated_parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        match shape {
            [_, c, h, w] if *c == self.cfg.in_channels && h % 8 == 0 && w % 8 == 0 && *h > 0 && *w > 0 => Ok(()),
            [_, c, ..] if *c != self.cfg.in_channels => Err(Error::shape(
                "unet forward",
                format!("expected {} input channels, got {c}", self.cfg.in_channels),
            )),
            s => Err(Error::shape("unet forward", format!("input {s:?} must be NCHW with H, W divisible by 8"))),
        }
    }

    /// Registers the parameters on `tape` (as gradient leaves when
    /// `trainable`) and records the forward pass. Returns the prediction and
    /// the parameter leaves in [`Model::params`] order.
    pub fn forward_on_tape(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        mode: NormMode,
        trainable: bool,
    ) -> Result<(Var, Vec<Var>)> {
        let vars: Vec<Var> = self.params.iter().map(|p| tape.leaf(p.value.clone(), trainable)).collect();
        self.forward_with_vars(tape, input, mode, vars)
    }

    /// Forward pass over parameter leaves already on `tape`, given in
    /// [`Model::params`] order.
    pub fn forward_with_vars(
        &mut self,
        tape: &mut Tape<T>,
        input: Var,
        mode: NormMode,
        vars: Vec<Var>,
    ) -> Result<(Var, Vec<Var>)> {
        self.check_input(tape.value(input).shape())?;
        if vars.len() != self.params.len() {
            return Err(Error::shape("unet forward", format!("{} parameter leaves for {} tensors", vars.len(), self.params.len())));
        }
        let k = self.cfg.kernel_size;
        let pad = k / 2;
        let mut p = 0usize;
        let mut n = 0usize;
        let mut block = |tape: &mut Tape<T>, x: Var, idx: usize, norms: &mut [BatchNormState<T>]| -> Result<Var> {
            let b = &self.blocks[idx];
            let y = tape.conv2d(x, vars[p], vars[p + 1], b.stride, pad)?;
            p += 2;
            if !b.norm_relu {
                return Ok(y);
            }
            let y = tape.batchnorm2d(y, vars[p], vars[p + 1], &mut norms[n], mode)?;
            p += 2;
            n += 1;
            Ok(tape.relu(y))
        };
        let norms = &mut self.norms;
        let mut enc_inputs = Vec::with_capacity(3);
        let mut x = input;
        for g in 0..3 {
            enc_inputs.push(x);
            x = block(tape, x, 2 * g, norms)?;
            x = block(tape, x, 2 * g + 1, norms)?;
        }
        for d in 0..3 {
            let group = 3 - d;
            let up = tape.upsample_nearest2x(x)?;
            let mut h = block(tape, up, 6 + 2 * d, norms)?;
            if self.cfg.skip_links.contains(&group) {
                let skip = enc_inputs[group - 1];
                h = match self.cfg.skip_mode {
                    SkipMode::Concat => tape.concat_channels(h, skip)?,
                    SkipMode::Add => tape.add(h, skip)?,
                };
            }
            x = block(tape, h, 7 + 2 * d, norms)?;
        }
        Ok((x, vars))
    }

    /// Eval-mode prediction. Does not modify the model.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut scratch = self.clone();
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let (y, _) = scratch.forward_on_tape(&mut tape, x, NormMode::Eval, false)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check_gradients;

    fn tiny(in_ch: usize) -> UNetConfig {
        let mut c = UNetConfig::quick(in_ch);
        c.base_width = 2;
        c
    }

    #[test]
    fn desk_preset_shape_contract() {
        let mut m: Model<f64> = build_unet(&UNetConfig::desk(6), 1).unwrap();
        let x = Tensor::from_fn(&[1, 6, 32, 32], |i| ((i as f64) * 0.01).sin());
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let (y, _) = m.forward_on_tape(&mut tape, xv, NormMode::Train, true).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 32, 32]);
    }

    #[test]
    fn output_matches_input_resolution() {
        let m: Model<f64> = build_unet(&tiny(3), 2).unwrap();
        for (h, w) in [(8, 8), (16, 24), (40, 8)] {
            let x = Tensor::from_fn(&[2, 3, h, w], |i| (i % 7) as f64);
            assert_eq!(m.predict(&x).unwrap().shape(), &[2, 1, h, w]);
        }
        assert!(m.predict(&Tensor::zeros(&[1, 3, 12, 16])).is_err());
        assert!(m.predict(&Tensor::zeros(&[1, 2, 16, 16])).is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a: Model<f64> = build_unet(&UNetConfig::quick(6), 9).unwrap();
        let b: Model<f64> = build_unet(&UNetConfig::quick(6), 9).unwrap();
        let c: Model<f64> = build_unet(&UNetConfig::quick(6), 10).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let mut c = UNetConfig::quick(6);
        c.skip_links = [3].into_iter().collect();
        assert!(matches!(build_unet::<f64>(&c, 0), Err(Error::Config(_))));
        assert!(build_unet_ablation::<f64>(&c, 0).is_ok());
        c.skip_links = [2, 4].into_iter().collect();
        assert!(build_unet_ablation::<f64>(&c, 0).is_err());
        let mut c = UNetConfig::quick(6);
        c.kernel_size = 4;
        assert!(build_unet::<f64>(&c, 0).is_err());
        let mut c = UNetConfig::quick(6);
        c.skip_links = [1, 2].into_iter().collect();
        c.skip_mode = SkipMode::Add;
        assert!(build_unet::<f64>(&c, 0).is_err());
        c.skip_links = [2, 3].into_iter().collect();
        assert!(build_unet::<f64>(&c, 0).is_ok());
    }

    #[test]
    fn zero_input_and_zero_final_layer_give_final_bias() {
        let mut m: Model<f64> = build_unet(&tiny(2), 3).unwrap();
        let n = m.params.len();
        m.params[n - 2].value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        m.params[n - 1].value.data_mut()[0] = 0.75;
        let y = m.predict(&Tensor::zeros(&[1, 2, 16, 16])).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn eval_forward_is_repeatable() {
        let m: Model<f64> = build_unet(&tiny(3), 4).unwrap();
        let x = Tensor::from_fn(&[2, 3, 16, 16], |i| ((i * 31 % 17) as f64) - 8.0);
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn closed_form_count_equals_instantiated_count() {
        for cfg in [UNetConfig::desk(6), UNetConfig::desk(3), UNetConfig::quick(6), tiny(5)] {
            let m: Model<f64> = build_unet(&cfg, 0).unwrap();
            assert_eq!(parameter_count(&cfg), m.instantiated_parameter_count(), "{cfg:?}");
        }
        let mut add = UNetConfig::quick(6);
        add.skip_mode = SkipMode::Add;
        let m: Model<f64> = build_unet(&add, 0).unwrap();
        assert_eq!(parameter_count(&add), m.instantiated_parameter_count());
    }

    #[test]
    fn removing_a_skip_changes_count_by_concat_width() {
        let full = UNetConfig::desk(6);
        let k2 = full.kernel_size * full.kernel_size;
        let [w1, w2, _] = full.widths();
        for (removed, skip_w, cout) in [(2usize, w1, w1), (3, w2, w2)] {
            let mut cfg = full.clone();
            cfg.skip_links.remove(&removed);
            let delta = parameter_count(&full) - parameter_count(&cfg);
            assert_eq!(delta, skip_w * cout * k2);
            let m: Model<f64> = build_unet_ablation(&cfg, 0).unwrap();
            assert_eq!(m.instantiated_parameter_count(), parameter_count(&cfg));
        }
    }

    #[test]
    fn full_preset_is_the_closest_sweep_point_and_within_budget() {
        let cfg = UNetConfig::full(6);
        let count = parameter_count(&cfg);
        assert!((7_350_000..=7_650_000).contains(&count), "{count}");
        for b in [cfg.base_width - 1, cfg.base_width + 1] {
            let mut other = cfg.clone();
            other.base_width = b;
            assert!(parameter_count(&other).abs_diff(FULL_PARAMETER_TARGET) >= count.abs_diff(FULL_PARAMETER_TARGET));
        }
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() {
        let cfg = tiny(6);
        let model: Model<f64> = build_unet(&cfg, 5).unwrap();
        let x = Tensor::from_fn(&[2, 6, 16, 16], |i| ((i as f64) * 0.37).sin() * 2.0);
        let target = Tensor::from_fn(&[2, 1, 16, 16], |i| ((i as f64) * 0.11).cos());
        let params: Vec<Tensor<f64>> = model.params().iter().map(|p| p.value.clone()).collect();
        let report = check_gradients(
            &params,
            |tape, vars| {
                let mut m = model.clone();
                let xv = tape.constant(x.clone());
                let tv = tape.constant(target.clone());
                let (y, _) = m.forward_with_vars(tape, xv, NormMode::Train, vars.to_vec())?;
                let d = tape.sub(y, tv)?;
                let sq = tape.square(d);
                tape.mean(sq)
            },
            1e-5,
            Some((200, 1)),
        )
        .unwrap();
        assert!(report.passes(1e-4), "{report:?}");
    }

}
