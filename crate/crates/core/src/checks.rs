//! Fast invariant suite behind the `check` command.
//!
//! Each check recomputes a quantity through an independent route (nested
//! loops, finite differences, two-pass statistics, byte round trips) and
//! compares. Everything runs on the calling thread, so the conv backward
//! perturbation hook affects it.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::Checkpoint;
use crate::data::regrid_bilinear;
use crate::data::{dataset_from_bytes, dataset_to_bytes, generate_dataset, DatasetSpec, Variable};
use crate::gradcheck::{check_gradients, relative_error};
use crate::losses::{loss, LossKind};
use crate::model::{build_unet, parameter_count, UNetConfig, FULL_PARAMETER_TARGET};
use crate::preprocessing::{GammaPlacement, GammaTransform, Pipeline};
use crate::tensor::{BatchNormState, NormMode, Tape, Tensor};

type T64 = Tensor<f64>;

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

type CheckFn = fn() -> std::result::Result<String, String>;

pub const CHECKS: [(&str, CheckFn); 12] = [
    ("conv2d_loop_oracle", conv_oracle),
    ("conv_bn_relu_gradients", conv_bn_relu_gradients),
    ("batchnorm_statistics", batchnorm_statistics),
    ("gamma_round_trip", gamma_round_trip),
    ("gamma_symmetry_identity", gamma_symmetry_identity),
    ("gamma_compression", gamma_compression),
    ("gamma_exponent_gradient", gamma_exponent_gradient),
    ("unet_gradients", unet_gradients),
    ("loss_gradients", loss_gradients),
    ("parameter_count", parameter_count_check),
    ("container_round_trip", container_round_trip),
    ("regrid_affine_exact", regrid_affine),
];

/// Runs every check in [`CHECKS`] order.
pub fn run_checks() -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .map(|&(name, f)| {
            let start = Instant::now();
            let r = f();
            let seconds = start.elapsed().as_secs_f64();
            match r {
                Ok(detail) => CheckOutcome { name, passed: true, detail, seconds },
                Err(detail) => CheckOutcome { name, passed: false, detail, seconds },
            }
        })
        .collect()
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> T64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

fn ensure(ok: bool, detail: String) -> std::result::Result<String, String> {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn conv_oracle() -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for (i, &(stride, pad)) in [(1, 1), (2, 1), (1, 0), (2, 0)].iter().enumerate() {
        let x = rand_tensor(&[2, 3, 7, 6], -2.0, 2.0, 10 + i as u64);
        let w = rand_tensor(&[4, 3, 3, 3], -1.0, 1.0, 20 + i as u64);
        let b = rand_tensor(&[4], -1.0, 1.0, 30 + i as u64);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let y = tape.conv2d(xv, wv, bv, stride, pad).map_err(err)?;
        let got = tape.value(y);
        let (n, cin, h, wd) = (2usize, 3usize, 7isize, 6isize);
        let oh = (h as usize + 2 * pad - 3) / stride + 1;
        let ow = (wd as usize + 2 * pad - 3) / stride + 1;
        if got.shape() != [n, 4, oh, ow] {
            return Err(format!("shape {:?}, expected {:?}", got.shape(), [n, 4, oh, ow]));
        }
        for s in 0..n {
            for o in 0..4 {
                for r in 0..oh {
                    for c in 0..ow {
                        let mut acc = b.data()[o];
                        for ci in 0..cin {
                            for kr in 0..3 {
                                for kc in 0..3 {
                                    let ir = (r * stride + kr) as isize - pad as isize;
                                    let ic = (c * stride + kc) as isize - pad as isize;
                                    if ir < 0 || ic < 0 || ir >= h || ic >= wd {
                                        continue;
                                    }
                                    let xi = ((s * cin + ci) * h as usize + ir as usize) * wd as usize + ic as usize;
                                    acc += x.data()[xi] * w.data()[((o * cin + ci) * 3 + kr) * 3 + kc];
                                }
                            }
                        }
                        let yi = ((s * 4 + o) * oh + r) * ow + c;
                        worst = worst.max((got.data()[yi] - acc).abs());
                    }
                }
            }
        }
    }
    ensure(worst < 1e-10, format!("max abs diff {worst:.3e} over 4 stride/padding settings"))
}

fn gradcheck_detail(r: &crate::gradcheck::GradCheckReport) -> String {
    format!("{} entries ({} kink crossings skipped), max rel err {:.3e}", r.checked, r.skipped, r.max_rel_err)
}

fn conv_bn_relu_gradients() -> std::result::Result<String, String> {
    let inputs = vec![
        rand_tensor(&[2, 2, 6, 6], -2.0, 2.0, 21),
        rand_tensor(&[3, 2, 3, 3], -1.0, 1.0, 22),
        rand_tensor(&[3], -0.5, 0.5, 23),
        rand_tensor(&[3], 0.5, 1.5, 24),
        rand_tensor(&[3], -0.5, 0.5, 25),
        rand_tensor(&[1, 3, 3, 3], -1.0, 1.0, 26),
        rand_tensor(&[1], -0.5, 0.5, 27),
    ];
    let r = check_gradients(
        &inputs,
        |t, v| {
            let mut st = BatchNormState::new(3, 0.1, 1e-5);
            let h = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            let h = t.batchnorm2d(h, v[3], v[4], &mut st, NormMode::Train)?;
            let h = t.relu(h);
            let out = t.conv2d(h, v[5], v[6], 1, 1)?;
            let sq = t.square(out);
            t.mean(sq)
        },
        FD_STEP,
        Some((200, 7)),
    )
    .map_err(err)?;
    ensure(r.passes(FD_TOL), gradcheck_detail(&r))
}

fn batchnorm_statistics() -> std::result::Result<String, String> {
    let mut worst_mean = 0.0f64;
    let mut worst_var = 0.0f64;
    for seed in 0..5 {
        let x = rand_tensor(&[4, 3, 5, 5], -10.0, 30.0, 40 + seed);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let mut st = BatchNormState::new(3, 0.1, 1e-5);
        let y = tape.batchnorm2d(xv, g, b, &mut st, NormMode::Train).map_err(err)?;
        let y = tape.value(y);
        for c in 0..3 {
            let vals: Vec<f64> = (0..4).flat_map(|s| y.data()[(s * 3 + c) * 25..(s * 3 + c + 1) * 25].to_vec()).collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let v = vals.iter().map(|z| (z - m) * (z - m)).sum::<f64>() / vals.len() as f64;
            worst_mean = worst_mean.max(m.abs());
            worst_var = worst_var.max((v - 1.0).abs());
        }
    }
    // Variance sits slightly below one because of epsilon.
    ensure(
        worst_mean < 1e-9 && worst_var < 1e-3,
        format!("max |channel mean| {worst_mean:.3e}, max |channel var - 1| {worst_var:.3e}"),
    )
}

fn gamma_round_trip() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let mut worst = 0.0f64;
    for gamma in [0.3, 0.7, 1.5, 2.2, 5.0] {
        let t = GammaTransform::fixed(gamma, vec![0]).map_err(err)?;
        let x = Tensor::from_fn(&[2000], |_| {
            let mag = 10f64.powf(rng.gen_range(-6.0..6.0));
            if rng.gen_bool(0.5) {
                -mag
            } else {
                mag
            }
        });
        let back = t.inverse(&t.forward(&x));
        for (a, b) in x.data().iter().zip(back.data()) {
            worst = worst.max((a - b).abs() / a.abs());
        }
    }
    ensure(worst < 1e-9, format!("max rel err {worst:.3e} over |x| in [1e-6, 1e6]"))
}

fn gamma_symmetry_identity() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let x = Tensor::from_fn(&[1000], |_| rng.gen_range(-1e3..1e3));
    let neg = x.map(|v| -v);
    let id = GammaTransform::fixed(1.0, vec![0]).map_err(err)?;
    if id.forward(&x) != x || id.inverse(&x) != x {
        return Err("gamma = 1 is not the identity".into());
    }
    for gamma in [0.4, 2.2, 3.0] {
        let t = GammaTransform::fixed(gamma, vec![0]).map_err(err)?;
        let (fx, fneg) = (t.forward(&x), t.forward(&neg));
        if fx.data().iter().zip(fneg.data()).any(|(a, b)| *a != -*b) {
            return Err(format!("f(-x) != -f(x) at gamma {gamma}"));
        }
    }
    if GammaTransform::fixed(2.2, vec![0]).map_err(err)?.forward(&Tensor::scalar(0.0)).data() != [0.0] {
        return Err("f(0) != 0".into());
    }
    Ok("odd symmetry and gamma = 1 identity hold exactly".into())
}

fn gamma_compression() -> std::result::Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    let mut n = 0usize;
    for _ in 0..10_000 {
        let gamma = rng.gen_range(1.01..6.0);
        let mag = rng.gen_range(1.001f64..1e4);
        let x = if rng.gen_bool(0.5) { mag } else { -mag };
        let t = GammaTransform::fixed(gamma, vec![0]).map_err(err)?;
        let f = t.forward(&Tensor::scalar(x)).data()[0];
        if !(f.abs() < x.abs()) {
            return Err(format!("|f({x})| = {} not below |x| at gamma {gamma}", f.abs()));
        }
        let inv = GammaTransform::fixed(1.0 / gamma, vec![0]).map_err(err)?;
        if !(inv.forward(&Tensor::scalar(x)).data()[0].abs() > x.abs()) {
            return Err(format!("expansion failed at x {x}, gamma {}", 1.0 / gamma));
        }
        n += 1;
    }
    ensure(n == 10_000, format!("{n} samples compress for gamma > 1 and expand for gamma < 1"))
}

fn gamma_exponent_gradient() -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    let mut cases: Vec<(f64, f64)> = vec![(5.0, 0.5)];
    cases.extend((0..20).map(|_| {
        let mag = rng.gen_range(0.01..50.0);
        (if rng.gen_bool(0.5) { mag } else { -mag }, rng.gen_range(0.2..3.0))
    }));
    for (x, e) in cases {
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::scalar(x));
        let ev = tape.param(Tensor::scalar(e));
        let y = tape.signed_pow(xv, ev).map_err(err)?;
        tape.backward(y).map_err(err)?;
        let analytic = tape.grad(ev).map(|g| g[0]).unwrap_or(0.0);
        let h = 1e-6;
        let f = |e: f64| x.signum() * x.abs().powf(e);
        let numeric = (f(e + h) - f(e - h)) / (2.0 * h);
        worst = worst.max(relative_error(analytic, numeric));
    }
    ensure(worst < 1e-5, format!("max rel err {worst:.3e} over 21 points"))
}

fn unet_gradients() -> std::result::Result<String, String> {
    let mut cfg = UNetConfig::quick(3);
    cfg.base_width = 3;
    let model = build_unet::<f64>(&cfg, 60).map_err(err)?;
    let mut inputs: Vec<T64> = model.params().iter().map(|p| p.value.clone()).collect();
    inputs.push(rand_tensor(&[2, 3, 16, 16], -2.0, 2.0, 61));
    let target = rand_tensor(&[2, 1, 16, 16], -1.0, 1.0, 62);
    let np = model.params().len();
    let r = check_gradients(
        &inputs,
        |t, v| {
            let mut m = model.clone();
            let (out, _) = m.forward_with_vars(t, v[np], NormMode::Train, v[..np].to_vec())?;
            let gt = t.constant(target.clone());
            loss(LossKind::L2, t, out, gt)
        },
        FD_STEP,
        Some((60, 63)),
    )
    .map_err(err)?;
    ensure(r.passes(FD_TOL), gradcheck_detail(&r))
}

fn loss_gradients() -> std::result::Result<String, String> {
    let pred = rand_tensor(&[2, 1, 4, 4], -2.0, 2.0, 70);
    // Keep |pred - gt| away from the L1 kink.
    let gt = pred.map(|v| v + if v > 0.0 { -0.3 } else { 0.4 });
    let mut details = Vec::new();
    for kind in [LossKind::L1, LossKind::L2] {
        let r = check_gradients(
            &[pred.clone()],
            |t, v| {
                let g = t.constant(gt.clone());
                loss(kind, t, v[0], g)
            },
            FD_STEP,
            None,
        )
        .map_err(err)?;
        if !r.passes(FD_TOL) {
            return Err(format!("{kind}: {}", gradcheck_detail(&r)));
        }
        details.push(format!("{kind} {:.1e}", r.max_rel_err));
    }
    Ok(format!("max rel err {}", details.join(", ")))
}

fn parameter_count_check() -> std::result::Result<String, String> {
    for (name, cfg) in [("quick", UNetConfig::quick(6)), ("desk", UNetConfig::desk(6)), ("desk/3ch", UNetConfig::desk(3))] {
        let closed = parameter_count(&cfg);
        let counted = build_unet::<f64>(&cfg, 0).map_err(err)?.instantiated_parameter_count();
        if closed != counted {
            return Err(format!("{name}: closed form {closed} vs instantiated {counted}"));
        }
    }
    let full = parameter_count(&UNetConfig::full(6));
    let off = (full as f64 / FULL_PARAMETER_TARGET as f64 - 1.0).abs();
    ensure(off <= 0.02, format!("closed form matches instantiation; full-size preset has {full} parameters ({:.2}% off)", 100.0 * off))
}

fn container_round_trip() -> std::result::Result<String, String> {
    let mut spec = DatasetSpec::quick(Variable::TemperatureLike, 80);
    spec.n_train = 3;
    spec.n_val = 1;
    spec.n_test = 1;
    let ds = generate_dataset(&spec).map_err(err)?;
    let bytes = dataset_to_bytes(&ds);
    let back = dataset_from_bytes(&bytes).map_err(err)?;
    if dataset_to_bytes(&back) != bytes || back.train != ds.train || back.test != ds.test {
        return Err("dataset container did not round-trip".into());
    }
    let model = build_unet::<f64>(&UNetConfig::quick(3), 81).map_err(err)?;
    let inputs: Vec<&T64> = ds.train.iter().map(|p| &p.input).collect();
    let targets: Vec<&T64> = ds.train.iter().map(|p| &p.target).collect();
    let gamma = GammaTransform::learnable(1.3, vec![0]).map_err(err)?;
    let pipeline = Pipeline::fit(gamma, GammaPlacement::InputAndTarget, &inputs, &targets).map_err(err)?;
    let ckpt = Checkpoint { model, pipeline, meta: vec![("check".into(), "1".into())] };
    let cbytes = ckpt.to_bytes();
    let cback = Checkpoint::<f64>::from_bytes(&cbytes).map_err(err)?;
    ensure(
        cback.to_bytes() == cbytes && cback.model.params() == ckpt.model.params() && cback.pipeline == ckpt.pipeline,
        format!("dataset {} bytes and checkpoint {} bytes round-trip exactly", bytes.len(), cbytes.len()),
    )
}

fn regrid_affine() -> std::result::Result<String, String> {
    let mut worst = 0.0f64;
    for &(sh, sw, th, tw) in &[(4, 4, 32, 32), (3, 5, 12, 20), (8, 8, 64, 64), (2, 2, 7, 9)] {
        let f = |r: f64, c: f64| 1.5 + 0.25 * r - 0.75 * c;
        let src = Tensor::from_fn(&[1, 1, sh, sw], |i| f((i / sw) as f64, (i % sw) as f64));
        let out = regrid_bilinear(&src, th, tw).map_err(err)?;
        let (sy, sx) = (sh as f64 / th as f64, sw as f64 / tw as f64);
        for r in 0..th {
            for c in 0..tw {
                // Cell-centre alignment: target centre maps into source
                // index space at (i + 0.5) * scale - 0.5.
                let want = f((r as f64 + 0.5) * sy - 0.5, (c as f64 + 0.5) * sx - 0.5);
                worst = worst.max((out.data()[r * tw + c] - want).abs());
            }
        }
    }
    ensure(worst < 1e-12, format!("max abs err {worst:.3e} on affine fields"))
}
