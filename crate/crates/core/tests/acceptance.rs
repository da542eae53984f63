//! Acceptance criteria 1-9, one PASS/FAIL line each.
//!
//! Criteria 5-7 train the six-cell matrix on the quick preset (32x32 grids,
//! 128 training pairs, 120 epochs). `ACCEPTANCE_SCALE=desk` switches them to
//! the desk preset (64x64, 256 pairs, 60 epochs), which takes hours on one
//! core. Run in release mode for that. Numeric arguments select criteria:
//! `cargo test --test acceptance -- 1 2 3`.

use std::io::Write;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use downscale_core::checkpoint::Checkpoint;
use downscale_core::checks::run_checks;
use downscale_core::config::Preset;
use downscale_core::data::{dataset_from_bytes, dataset_to_bytes, generate_dataset, load_dataset, save_dataset, Dataset, DatasetSpec, Variable};
use downscale_core::gradcheck::{check_gradients, relative_error, GradCheckReport};
use downscale_core::losses::{l1_loss, l2_loss, LossKind};
use downscale_core::model::{build_unet, parameter_count, UNetConfig, FULL_PARAMETER_TARGET};
use downscale_core::preprocessing::{GammaMode, GammaTransform};
use downscale_core::tensor::{BatchNormState, NormMode, Tape, Tensor};
use downscale_core::training::{
    evaluate_checkpoint, matrix_specs, run_cells, run_matrix, train, ExperimentSpec, ResultsTable, TrainConfig,
};

type T64 = Tensor<f64>;

const H: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const SEEDS: [u64; 3] = [0, 1, 2];
const GUARD_SEEDS: [u64; 2] = [3, 4];

struct Verdict {
    passed: bool,
    detail: String,
}

fn verdict(passed: bool, detail: impl Into<String>) -> Verdict {
    Verdict { passed, detail: detail.into() }
}

fn say(line: &str) {
    let mut err = std::io::stderr();
    let _ = writeln!(err, "{line}");
    let _ = err.flush();
}

fn rand_tensor(shape: &[usize], lo: f64, hi: f64, seed: u64) -> T64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(lo..hi))
}

/// Like `rand_tensor` but with |x| >= `gap`, away from kinks at zero.
fn rand_away_from_zero(shape: &[usize], gap: f64, seed: u64) -> T64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(gap..2.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces any output to a scalar with fixed random weights so every output
/// element receives a distinct upstream gradient.
fn weighted_sum(t: &mut Tape<f64>, out: downscale_core::Var, seed: u64) -> downscale_core::Result<downscale_core::Var> {
    let shape = t.value(out).shape().to_vec();
    let w = t.constant(rand_tensor(&shape, -1.0, 1.0, seed));
    let p = t.mul(out, w)?;
    Ok(t.sum(p))
}

// ---------------------------------------------------------------- 1

fn criterion_1() -> Verdict {
    let start = Instant::now();
    let mut lines = Vec::new();
    let mut ok = true;
    let mut record = |name: &str, r: downscale_core::Result<GradCheckReport>| match r {
        Ok(r) => {
            ok &= r.passes(GRAD_TOL);
            lines.push(format!("{name} {:.1e}", r.max_rel_err));
            if !r.passes(GRAD_TOL) {
                lines.push(format!("worst entry of {name}: {:?}", r.worst));
            }
        }
        Err(e) => {
            ok = false;
            lines.push(format!("{name} error {e}"));
        }
    };
    let a = rand_tensor(&[2, 3], -2.0, 2.0, 1);
    let b = rand_tensor(&[2, 3], -2.0, 2.0, 2);
    record("add", check_gradients(&[a.clone(), b.clone()], |t, v| { let o = t.add(v[0], v[1])?; weighted_sum(t, o, 9) }, H, None));
    record("sub", check_gradients(&[a.clone(), b.clone()], |t, v| { let o = t.sub(v[0], v[1])?; weighted_sum(t, o, 9) }, H, None));
    record("mul", check_gradients(&[a.clone(), b.clone()], |t, v| { let o = t.mul(v[0], v[1])?; weighted_sum(t, o, 9) }, H, None));
    record("scalar_mul", check_gradients(&[a.clone()], |t, v| { let o = t.scalar_mul(v[0], -1.7); weighted_sum(t, o, 9) }, H, None));
    record("exp", check_gradients(&[a.clone()], |t, v| { let o = t.exp(v[0]); weighted_sum(t, o, 9) }, H, None));
    let away = rand_away_from_zero(&[2, 3], 0.1, 3);
    record("abs", check_gradients(&[away.clone()], |t, v| { let o = t.abs(v[0]); weighted_sum(t, o, 9) }, H, None));
    record("relu", check_gradients(&[away.clone()], |t, v| { let o = t.relu(v[0]); weighted_sum(t, o, 9) }, H, None));
    record("square", check_gradients(&[a.clone()], |t, v| { let o = t.square(v[0]); weighted_sum(t, o, 9) }, H, None));
    record("sum", check_gradients(&[a.clone()], |t, v| { let o = t.sum(v[0]); let o = t.square(o); Ok(o) }, H, None));
    record("mean", check_gradients(&[a.clone()], |t, v| { let o = t.mean(v[0])?; Ok(t.square(o)) }, H, None));

    let x = rand_tensor(&[2, 3, 6, 6], -2.0, 2.0, 4);
    let w = rand_tensor(&[4, 3, 3, 3], -1.0, 1.0, 5);
    let bias = rand_tensor(&[4], -1.0, 1.0, 6);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0)] {
        record(
            &format!("conv2d(s{stride},p{pad})"),
            check_gradients(&[x.clone(), w.clone(), bias.clone()], |t, v| { let o = t.conv2d(v[0], v[1], v[2], stride, pad)?; weighted_sum(t, o, 9) }, H, None),
        );
    }
    let scale = rand_tensor(&[3], 0.5, 1.5, 7);
    let shift = rand_tensor(&[3], -0.5, 0.5, 8);
    for mode in [NormMode::Train, NormMode::Eval] {
        let mut base = BatchNormState::new(3, 0.1, 1e-5);
        base.running_mean = vec![0.3, -0.2, 0.1];
        base.running_var = vec![1.5, 0.7, 2.0];
        record(
            &format!("batchnorm2d({mode:?})"),
            check_gradients(
                &[x.clone(), scale.clone(), shift.clone()],
                |t, v| {
                    let mut st = base.clone();
                    let o = t.batchnorm2d(v[0], v[1], v[2], &mut st, mode)?;
                    weighted_sum(t, o, 9)
                },
                H,
                None,
            ),
        );
    }
    record("upsample_nearest2x", check_gradients(&[x.clone()], |t, v| { let o = t.upsample_nearest2x(v[0])?; weighted_sum(t, o, 9) }, H, None));
    let y = rand_tensor(&[2, 2, 6, 6], -2.0, 2.0, 10);
    record("concat_channels", check_gradients(&[x.clone(), y], |t, v| { let o = t.concat_channels(v[0], v[1])?; weighted_sum(t, o, 9) }, H, None));
    record("slice_channels", check_gradients(&[x.clone()], |t, v| { let o = t.slice_channels(v[0], 1, 3)?; weighted_sum(t, o, 9) }, H, None));
    record(
        "channel_affine",
        check_gradients(&[x.clone()], |t, v| { let o = t.channel_affine(v[0], &[2.0, -0.5, 0.3], &[1.0, 0.0, -2.0])?; weighted_sum(t, o, 9) }, H, None),
    );
    let sp = rand_away_from_zero(&[2, 5], 1e-3, 11);
    record(
        "signed_pow",
        check_gradients(&[sp, Tensor::scalar(0.6)], |t, v| { let o = t.signed_pow(v[0], v[1])?; weighted_sum(t, o, 9) }, H, None),
    );
    let pred = rand_tensor(&[2, 1, 3, 3], -2.0, 2.0, 12);
    let gt = pred.map(|p| p + if p > 0.0 { -0.5 } else { 0.5 });
    record("l1_loss", check_gradients(&[pred.clone()], |t, v| { let g = t.constant(gt.clone()); l1_loss(t, v[0], g) }, H, None));
    record("l2_loss", check_gradients(&[pred], |t, v| { let g = t.constant(gt.clone()); l2_loss(t, v[0], g) }, H, None));

    // Full desk-scale network at the desk grid size.
    let cfg = UNetConfig::desk(6);
    let model = build_unet::<f64>(&cfg, 2024).expect("desk model");
    let input = rand_tensor(&[2, 6, 64, 64], -2.0, 2.0, 13);
    let target = rand_tensor(&[2, 1, 64, 64], -1.0, 1.0, 14);
    let params: Vec<T64> = model.params().iter().map(|p| p.value.clone()).collect();
    let unet = check_gradients(
        &params,
        |t, v| {
            let mut m = model.clone();
            let x = t.constant(input.clone());
            let (out, _) = m.forward_with_vars(t, x, NormMode::Train, v.to_vec())?;
            let g = t.constant(target.clone());
            l2_loss(t, out, g)
        },
        H,
        Some((200, 15)),
    );
    let (unet_checked, unet_skipped) = unet.as_ref().map(|r| (r.checked, r.skipped)).unwrap_or((0, 0));
    record(
        &format!("desk unet ({} params, {unet_checked} compared, {unet_skipped} kink crossings redrawn)", parameter_count(&cfg)),
        unet,
    );
    let secs = start.elapsed().as_secs_f64();
    ok &= unet_checked >= 200 && secs < 120.0;
    verdict(ok, format!("max rel err per op: {}; {secs:.1}s (budget 120s)", lines.join(", ")))
}

// ---------------------------------------------------------------- 2

fn signed(rng: &mut ChaCha8Rng, lo_exp: f64, hi_exp: f64) -> f64 {
    let m = 10f64.powf(rng.gen_range(lo_exp..hi_exp));
    if rng.gen_bool(0.5) {
        m
    } else {
        -m
    }
}

fn criterion_2() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    let mut notes = Vec::new();
    let mut ok = true;

    let xs = Tensor::from_fn(&[4000], |_| signed(&mut rng, -6.0, 6.0));
    let neg = xs.map(|v| -v);
    let mut odd = true;
    for gamma in [0.25, 0.8, 1.0, 2.2, 4.0] {
        let t = GammaTransform::fixed(gamma, vec![0]).unwrap();
        odd &= t.forward(&xs).data().iter().zip(t.forward(&neg).data()).all(|(a, b)| *a == -*b);
        odd &= t.inverse(&xs).data().iter().zip(t.inverse(&neg).data()).all(|(a, b)| *a == -*b);
    }
    ok &= odd;
    notes.push(format!("odd symmetry exact: {odd}"));

    let fixed1 = GammaTransform::fixed(1.0, vec![0]).unwrap();
    let learn1 = GammaTransform::learnable(1.0, vec![0]).unwrap();
    let mut tape = Tape::new();
    let xv = tape.constant(xs.clone());
    let th = tape.param(Tensor::scalar(learn1.theta()));
    let on_tape = learn1.forward_on_tape(&mut tape, xv, Some(th)).unwrap();
    let identity = fixed1.forward(&xs) == xs && fixed1.inverse(&xs) == xs && learn1.forward(&xs) == xs && *tape.value(on_tape) == xs;
    ok &= identity;
    notes.push(format!("gamma=1 identity exact: {identity}"));

    let mut worst_rt = 0.0f64;
    for _ in 0..50 {
        let gamma = rng.gen_range(0.2..5.0);
        let t = GammaTransform::fixed(gamma, vec![0]).unwrap();
        let x = Tensor::from_fn(&[200], |_| signed(&mut rng, -6.0, 6.0));
        for (a, b) in x.data().iter().zip(t.inverse(&t.forward(&x)).data()) {
            worst_rt = worst_rt.max((a - b).abs() / a.abs());
        }
    }
    ok &= worst_rt < 1e-9;
    notes.push(format!("round trip max rel err {worst_rt:.2e} (< 1e-9)"));

    let mut compress_ok = 0usize;
    for _ in 0..10_000 {
        let gamma = rng.gen_range(1.0f64..8.0);
        let x = signed(&mut rng, 1e-3, 6.0);
        if gamma == 1.0 {
            continue;
        }
        let t = GammaTransform::fixed(gamma, vec![0]).unwrap();
        let f = t.forward(&Tensor::scalar(x)).data()[0];
        compress_ok += usize::from(f.abs() < x.abs());
    }
    ok &= compress_ok == 10_000;
    notes.push(format!("compression holds for {compress_ok}/10000"));

    let mut worst_dg = 0.0f64;
    for _ in 0..500 {
        let gamma: f64 = rng.gen_range(0.3..4.0);
        let x = signed(&mut rng, -2.0, 2.0);
        let t = GammaTransform::learnable(gamma, vec![0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::scalar(x));
        let th = tape.param(Tensor::scalar(t.theta()));
        let y = t.forward_on_tape(&mut tape, xv, Some(th)).unwrap();
        tape.backward(y).unwrap();
        // gamma = exp(theta), so d/dgamma = (d/dtheta) / gamma.
        let analytic = tape.grad(th).unwrap()[0] / gamma;
        let f = |g: f64| x.signum() * x.abs().powf(1.0 / g);
        let h = 1e-6 * gamma;
        let numeric = (f(gamma + h) - f(gamma - h)) / (2.0 * h);
        worst_dg = worst_dg.max(relative_error(analytic, numeric));
    }
    ok &= worst_dg < 1e-5;
    notes.push(format!("d f/d gamma max rel err {worst_dg:.2e} (< 1e-5)"));
    verdict(ok, notes.join("; "))
}

// ---------------------------------------------------------------- 3

fn conv_loops(x: &T64, w: &T64, b: &T64, stride: usize, pad: usize) -> (Vec<usize>, Vec<f64>) {
    let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * o * oh * ow];
    for s in 0..n {
        for oc in 0..o {
            for r in 0..oh {
                for q in 0..ow {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for kr in 0..k {
                            for kc in 0..k {
                                let ir = (r * stride + kr) as isize - pad as isize;
                                let iq = (q * stride + kc) as isize - pad as isize;
                                if ir >= 0 && iq >= 0 && (ir as usize) < h && (iq as usize) < wd {
                                    acc += x.data()[((s * c + ic) * h + ir as usize) * wd + iq as usize]
                                        * w.data()[((oc * c + ic) * k + kr) * k + kc];
                                }
                            }
                        }
                    }
                    out[((s * o + oc) * oh + r) * ow + q] = acc;
                }
            }
        }
    }
    (vec![n, o, oh, ow], out)
}

fn criterion_3() -> Verdict {
    let mut worst_conv = 0.0f64;
    let mut cases = 0;
    for (i, &(k, stride, pad, h, w)) in [(3, 1, 1, 8, 8), (3, 2, 1, 9, 7), (1, 1, 0, 5, 6), (5, 2, 2, 11, 10), (3, 1, 0, 6, 9)].iter().enumerate() {
        let s = 300 + 10 * i as u64;
        let x = rand_tensor(&[2, 3, h, w], -3.0, 3.0, s);
        let wt = rand_tensor(&[4, 3, k, k], -1.0, 1.0, s + 1);
        let b = rand_tensor(&[4], -1.0, 1.0, s + 2);
        let mut t = Tape::new();
        let (xv, wv, bv) = (t.constant(x.clone()), t.constant(wt.clone()), t.constant(b.clone()));
        let y = t.conv2d(xv, wv, bv, stride, pad).unwrap();
        let (shape, want) = conv_loops(&x, &wt, &b, stride, pad);
        assert_eq!(t.value(y).shape(), &shape[..]);
        worst_conv = t.value(y).data().iter().zip(&want).fold(worst_conv, |m, (a, b)| m.max((a - b).abs()));
        cases += 1;
    }
    let mut worst_mean = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(400 + seed);
        let (n, c, h, w) = (rng.gen_range(2..5), rng.gen_range(1..5), rng.gen_range(2..7), rng.gen_range(2..7));
        let offset = rng.gen_range(-100.0..100.0);
        let spread = rng.gen_range(0.1..50.0);
        let x = rand_tensor(&[n, c, h, w], offset - spread, offset + spread, 500 + seed);
        let mut t = Tape::new();
        let xv = t.constant(x);
        let g = t.constant(Tensor::full(&[c], 1.0));
        let b = t.constant(Tensor::zeros(&[c]));
        let mut st = BatchNormState::new(c, 0.1, 1e-5);
        let y = t.batchnorm2d(xv, g, b, &mut st, NormMode::Train).unwrap();
        let y = t.value(y);
        for ch in 0..c {
            let vals: Vec<f64> = (0..n).flat_map(|s| y.data()[(s * c + ch) * h * w..(s * c + ch + 1) * h * w].to_vec()).collect();
            worst_mean = worst_mean.max((vals.iter().sum::<f64>() / vals.len() as f64).abs());
        }
    }
    verdict(
        worst_conv < 1e-10 && worst_mean < 1e-9,
        format!("conv2d vs loops max abs diff {worst_conv:.2e} over {cases} configs (< 1e-10); batch-norm channel mean max {worst_mean:.2e} over 20 batches (< 1e-9)"),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Verdict {
    let cfg = UNetConfig::full(6);
    let closed = parameter_count(&cfg);
    let counted = build_unet::<f64>(&cfg, 0).unwrap().instantiated_parameter_count();
    let off = closed as f64 / FULL_PARAMETER_TARGET as f64 - 1.0;
    let mut exact = closed == counted;
    for c in [UNetConfig::desk(6), UNetConfig::quick(3), UNetConfig::full(3)] {
        exact &= parameter_count(&c) == build_unet::<f64>(&c, 1).unwrap().instantiated_parameter_count();
    }
    verdict(
        off.abs() <= 0.02 && exact,
        format!(
            "full-size preset (base width {}) has {closed} parameters, {:+.2}% from 7.5M; closed form equals instantiation: {exact}",
            cfg.base_width,
            100.0 * off
        ),
    )
}

// ---------------------------------------------------------------- 5-7

fn preset() -> Preset {
    match std::env::var("ACCEPTANCE_SCALE").as_deref() {
        Ok("desk") => Preset::Desk,
        _ => Preset::Quick,
    }
}

struct Matrix {
    data: Dataset,
    base: ExperimentSpec,
    table: ResultsTable,
    seconds: f64,
}

fn precip_matrix() -> &'static Matrix {
    static M: OnceLock<Matrix> = OnceLock::new();
    M.get_or_init(|| {
        let cfg = preset().config(Variable::PrecipitationLike);
        let data = generate_dataset(&cfg.data).expect("precipitation data");
        let start = Instant::now();
        let table = run_cells::<f64>("precipitation_like", &matrix_specs(&cfg.experiment, &SEEDS), &data, 1, &|r, _| {
            say(&format!("    trained {} seed {}", r.label, r.seed));
        });
        Matrix { data, base: cfg.experiment, table, seconds: start.elapsed().as_secs_f64() }
    })
}

/// Matrix over all five seeds; the stochastic-training guard.
fn guarded_matrix() -> &'static ResultsTable {
    static G: OnceLock<ResultsTable> = OnceLock::new();
    G.get_or_init(|| {
        let m = precip_matrix();
        say("    re-running with 5 seeds");
        let extra = run_cells::<f64>("precipitation_like", &matrix_specs(&m.base, &GUARD_SEEDS), &m.data, 1, &|r, _| {
            say(&format!("    trained {} seed {}", r.label, r.seed));
        });
        let mut t = m.table.clone();
        t.rows.extend(extra.rows);
        t
    })
}

fn means(t: &ResultsTable, label: &str) -> (f64, f64) {
    let r = t.mean_of(label).expect("row present");
    (r.avg_abs_diff.0, r.avg_mse.0)
}

fn loss_metric_check(t: &ResultsTable) -> (bool, String) {
    let mut ok = !t.any_failed();
    let mut parts = Vec::new();
    for (l1, l2) in [("L1", "L2"), ("L1+NL2.2", "L2+NL2.2"), ("L1+Learn", "L2+Learn")] {
        let (a1, m1) = means(t, l1);
        let (a2, m2) = means(t, l2);
        let pair_ok = a1 <= a2 && m2 <= m1;
        ok &= pair_ok;
        parts.push(format!("{l1} vs {l2}: abs {a1:.3} vs {a2:.3}, mse {m1:.4e} vs {m2:.4e} [{}]", if pair_ok { "ok" } else { "violated" }));
    }
    (ok, parts.join("; "))
}

fn criterion_5() -> Verdict {
    let m = precip_matrix();
    let (mut ok, mut detail) = loss_metric_check(&m.table);
    if !ok {
        let (ok5, d5) = loss_metric_check(guarded_matrix());
        detail = format!("3 seeds: {detail}; 5 seeds: {d5}");
        ok = ok5;
    }
    let budget = 90.0 * 60.0;
    if preset() == Preset::Desk {
        ok &= m.seconds <= budget;
    }
    verdict(ok, format!("{} preset, {:.0}s for 18 runs; {detail}", preset(), m.seconds))
}

fn gamma_counts(t: &ResultsTable, label: &str, pass: impl Fn(f64) -> bool) -> (usize, Vec<String>) {
    let mut n = 0;
    let mut vals = Vec::new();
    for r in t.rows.iter().filter(|r| r.label == label) {
        match &r.outcome {
            Ok(c) => {
                n += usize::from(pass(c.gamma_final));
                vals.push(format!("{:.3}", c.gamma_final));
            }
            Err(_) => vals.push("failed".into()),
        }
    }
    (n, vals)
}

fn criterion_6() -> Verdict {
    let precip = &precip_matrix().table;
    let cfg = preset().config(Variable::TemperatureLowRange);
    let data = generate_dataset(&cfg.data).expect("low-range data");
    let specs: Vec<ExperimentSpec> =
        matrix_specs(&cfg.experiment, &SEEDS).into_iter().filter(|s| s.preproc == GammaMode::Learnable).collect();
    let low = run_cells::<f64>("temperature_low_range", &specs, &data, 1, &|r, _| {
        say(&format!("    trained {} seed {} (low range)", r.label, r.seed));
    });
    let mut ok = true;
    let mut parts = Vec::new();
    for label in ["L1+Learn", "L2+Learn"] {
        let (n, v) = gamma_counts(precip, label, |g| g > 1.05);
        ok &= n >= 2;
        parts.push(format!("precipitation {label} gamma [{}] ({n}/3 > 1.05)", v.join(", ")));
        let (n, v) = gamma_counts(&low, label, |g| g < 0.95);
        ok &= n >= 2;
        parts.push(format!("low-range {label} gamma [{}] ({n}/3 < 0.95)", v.join(", ")));
    }
    verdict(ok, parts.join("; "))
}

fn preprocessing_check(t: &ResultsTable) -> (bool, String) {
    let mut ok = !t.any_failed();
    let mut parts = Vec::new();
    for loss in ["L1", "L2"] {
        let (_, base) = means(t, loss);
        let (_, fixed) = means(t, &format!("{loss}+NL2.2"));
        let (_, learn) = means(t, &format!("{loss}+Learn"));
        let (a, b) = (fixed <= base, learn <= fixed);
        ok &= a && b;
        parts.push(format!(
            "{loss}: mse {base:.4e}, +NL2.2 {fixed:.4e} [{}], +Learn {learn:.4e} [{}]",
            if a { "<= base" } else { "> base" },
            if b { "<= NL2.2" } else { "> NL2.2" }
        ));
    }
    (ok, parts.join("; "))
}

fn criterion_7() -> Verdict {
    let (ok, detail) = preprocessing_check(&precip_matrix().table);
    if ok {
        return verdict(true, format!("3 seeds: {detail}"));
    }
    let (ok5, d5) = preprocessing_check(guarded_matrix());
    verdict(ok5, format!("3 seeds: {detail}; 5 seeds: {d5}"))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Verdict {
    let spec = DatasetSpec {
        n_train: 8,
        n_val: 4,
        n_test: 4,
        height: 16,
        width: 16,
        coarsen_factor: 4,
        ..DatasetSpec::quick(Variable::PrecipitationLike, 77)
    };
    let data = generate_dataset(&spec).unwrap();
    let again = generate_dataset(&spec).unwrap();
    let mut model = UNetConfig::quick(6);
    model.base_width = 4;
    let base = ExperimentSpec::new(LossKind::L1, GammaMode::None, model, TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::quick(0) });
    let t1 = run_matrix::<f64>(&base, &data, &[0, 1], 1);
    let t2 = run_matrix::<f64>(&base, &again, &[0, 1], 1);
    let t3 = run_matrix::<f64>(&base, &data, &[0, 1], 3);
    let tables = t1.to_csv() == t2.to_csv() && t1.to_text() == t2.to_text() && t1.to_csv() == t3.to_csv() && !t1.any_failed();

    let dir = tempfile::tempdir().unwrap();
    let bytes = dataset_to_bytes(&data);
    let ds_path = dir.path().join("d.dsl");
    save_dataset(&data, &ds_path).unwrap();
    let loaded = load_dataset(&ds_path).unwrap();
    let dataset_ok = dataset_to_bytes(&dataset_from_bytes(&bytes).unwrap()) == bytes
        && std::fs::read(&ds_path).unwrap() == bytes
        && loaded == data;

    let mut learn = base.clone();
    learn.preproc = GammaMode::Learnable;
    let out = train::<f64>(&learn, &data, None).unwrap();
    let ck_path = dir.path().join("c.dslc");
    out.best.save(&ck_path).unwrap();
    let back = Checkpoint::<f64>::load(&ck_path).unwrap();
    let m1 = evaluate_checkpoint(&out.best, &data.test, 4).unwrap();
    let m2 = evaluate_checkpoint(&back, &data.test, 4).unwrap();
    let ck_ok = back.to_bytes() == out.best.to_bytes()
        && std::fs::read(&ck_path).unwrap() == out.best.to_bytes()
        && m1 == m2
        && m1.avg_mse.to_bits() == m2.avg_mse.to_bits();
    verdict(
        tables && dataset_ok && ck_ok,
        format!(
            "tables identical across runs and worker counts: {tables}; dataset container exact: {dataset_ok} ({} bytes); checkpoint exact with identical metrics: {ck_ok}",
            bytes.len()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Verdict {
    let start = Instant::now();
    let out = run_checks();
    let secs = start.elapsed().as_secs_f64();
    let failed: Vec<&str> = out.iter().filter(|o| !o.passed).map(|o| o.name).collect();
    verdict(
        failed.is_empty() && out.len() >= 6 && secs < 300.0,
        format!("{} named checks, failed: [{}], {secs:.1}s (budget 300s)", out.len(), failed.join(", ")),
    )
}

fn main() {
    // `cargo test` passes harness flags such as `--list`; nothing to list.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let criteria: [(u32, &str, fn() -> Verdict); 9] = [
        (1, "gradient fidelity", criterion_1),
        (2, "gamma transform suite", criterion_2),
        (3, "conv/batch-norm oracles", criterion_3),
        (4, "parameter budget", criterion_4),
        (5, "loss-metric correspondence", criterion_5),
        (6, "learnable gamma direction", criterion_6),
        (7, "preprocessing benefit direction", criterion_7),
        (8, "determinism and persistence", criterion_8),
        (9, "self-check gate", criterion_9),
    ];
    // Numeric arguments select criteria, e.g. `-- 1 4 9`; default is all.
    let chosen: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = Vec::new();
    for (id, name, f) in criteria.into_iter().filter(|c| chosen.is_empty() || chosen.contains(&c.0)) {
        let start = Instant::now();
        let v = f();
        say(&format!(
            "criterion {id} ({name}): {} [{:.1}s] {}",
            if v.passed { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64(),
            v.detail
        ));
        if !v.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        say("acceptance: all selected criteria pass");
    } else {
        say(&format!("acceptance: failing criteria {failed:?}"));
        std::process::exit(1);
    }
}
