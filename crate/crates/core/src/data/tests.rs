use std::collections::HashSet;

use sha2::{Digest, Sha256};

use super::*;

fn spec(variable: Variable, seed: u64) -> DatasetSpec {
    DatasetSpec { n_train: 6, n_val: 2, n_test: 2, ..DatasetSpec::desk(variable, seed) }
}

fn pooled<'a>(fields: impl IntoIterator<Item = &'a ClimateField>) -> Vec<f64> {
    fields.into_iter().flat_map(|f| f.grid.data().iter().copied()).collect()
}

/// Population skewness from raw central moments.
fn skewness(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let m2 = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
    let m3 = v.iter().map(|x| (x - m).powi(3)).sum::<f64>() / n;
    m3 / m2.powf(1.5)
}

/// Pearson correlation between horizontally and vertically adjacent pixels.
fn lag1_autocorrelation(fields: &[ClimateField]) -> f64 {
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for f in fields {
        let (h, w) = (f.grid.shape()[2], f.grid.shape()[3]);
        let d = f.grid.data();
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    a.push(d[y * w + x]);
                    b.push(d[y * w + x + 1]);
                }
                if y + 1 < h {
                    a.push(d[y * w + x]);
                    b.push(d[(y + 1) * w + x]);
                }
            }
        }
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(&b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Nearest-rank quantile.
fn nearest_rank(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let rank = (q * v.len() as f64).ceil() as usize;
    v[rank.clamp(1, v.len()) - 1]
}

fn bits(t: &Tensor<f64>) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

#[test]
fn temperature_fields_are_smooth_and_nearly_symmetric() {
    let s = spec(Variable::TemperatureLike, 1);
    let f = gen_temperature_like(&s, Split::Train, 200).unwrap();
    let sk = skewness(&pooled(&f));
    assert!((-0.5..=0.5).contains(&sk), "skewness {sk}");
    let ac = lag1_autocorrelation(&f);
    assert!(ac > 0.9, "autocorrelation {ac}");
    for field in &f {
        let v = field.grid.data();
        assert!(v.iter().all(|x| x.is_finite()));
        assert!(skewness(v).is_finite(), "field has zero spread");
    }
}

#[test]
fn temperature_fields_without_lapse_have_target_moments() {
    let s = DatasetSpec { lapse_rate: 0.0, ..spec(Variable::TemperatureLike, 2) };
    for field in gen_temperature_like(&s, Split::Val, 5).unwrap() {
        let v = field.grid.data();
        let n = v.len() as f64;
        let m = v.iter().sum::<f64>() / n;
        let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
        assert!((m - 10.0).abs() < 1e-9 && (sd - 8.0).abs() < 1e-9);
    }
}

#[test]
fn generators_are_deterministic() {
    for v in [Variable::TemperatureLike, Variable::PrecipitationLike] {
        let s = spec(v, 7);
        let a = predictand_fields(&s, Split::Test, 3).unwrap();
        let b = predictand_fields(&s, Split::Test, 3).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(bits(&x.grid), bits(&y.grid));
        }
        let other = predictand_fields(&spec(v, 8), Split::Test, 1).unwrap();
        assert_ne!(bits(&a[0].grid), bits(&other[0].grid));
    }
}

#[test]
fn precipitation_is_zero_inflated_and_heavy_tailed() {
    let s = spec(Variable::PrecipitationLike, 3);
    let f = gen_precipitation_like(&s, Split::Train, 200).unwrap();
    let all = pooled(&f);
    assert!(all.iter().all(|&v| v >= 0.0));
    let zf = all.iter().filter(|&&v| v == 0.0).count() as f64 / all.len() as f64;
    assert!((0.40..=0.70).contains(&zf), "zero fraction {zf}");
    let nz: Vec<f64> = all.iter().copied().filter(|&v| v > 0.0).collect();
    let ratio = nearest_rank(all.clone(), 0.999) / (nz.iter().sum::<f64>() / nz.len() as f64);
    assert!(ratio > 50.0, "tail ratio {ratio}");
}

#[test]
fn miscalibrated_precipitation_is_rejected() {
    let s = DatasetSpec { precip_c: 0.01, ..spec(Variable::PrecipitationLike, 3) };
    assert!(matches!(gen_precipitation_like(&s, Split::Train, 4), Err(Error::Calibration(_))));
    let s = DatasetSpec { precip_a: 0.5, ..spec(Variable::PrecipitationLike, 3) };
    assert!(matches!(generate_dataset(&s), Err(Error::Calibration(_))));
}

#[test]
fn ten_seed_distribution_audit() {
    for seed in 100..110 {
        let s = spec(Variable::PrecipitationLike, seed);
        let st = check_precip_calibration(&s).unwrap();
        assert!(st.zero_fraction >= 0.40 && st.zero_fraction <= 0.70 && st.tail_ratio > 50.0, "seed {seed}: {st:?}");
        let t = gen_temperature_like(&spec(Variable::TemperatureLike, seed), Split::Train, 200).unwrap();
        let sk = skewness(&pooled(&t));
        assert!((-0.5..=0.5).contains(&sk), "seed {seed}: skewness {sk}");
    }
}

#[test]
fn coarsen_regrid_round_trip_is_close_for_smooth_fields() {
    let g = SpectralGenerator::new(64, 64, AMPLITUDE_EXPONENT).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut err, mut var) = (0.0, 0.0);
    for _ in 0..50 {
        let f = Tensor::new(vec![1, 1, 64, 64], g.sample(&mut rng)).unwrap();
        let back = regrid_bilinear(&coarsen(&f, 8).unwrap(), 64, 64).unwrap();
        let m = f.data().iter().sum::<f64>() / 4096.0;
        err += back.data().iter().zip(f.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        var += f.data().iter().map(|x| (x - m).powi(2)).sum::<f64>();
    }
    let rel = (err / var).sqrt();
    assert!(rel < 0.15, "relative RMSE {rel}");
}

#[test]
fn assembled_inputs_follow_the_channel_contract() {
    let ds = generate_dataset(&spec(Variable::PrecipitationLike, 5)).unwrap();
    assert_eq!(ds.train[0].input.shape(), &[6, 64, 64]);
    let ts = generate_dataset(&spec(Variable::TemperatureLike, 5)).unwrap();
    assert_eq!(ts.train[0].input.shape(), &[3, 64, 64]);
    for pair in ds.train.iter().chain(&ts.test) {
        let t = pair.target.clone().reshape(vec![1, 1, 64, 64]).unwrap();
        let replay = regrid_bilinear(&coarsen(&t, 8).unwrap(), 64, 64).unwrap();
        assert_eq!(bits(&replay), pair.input.data()[..4096].iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }
    // elevation channels are shared across samples
    assert_eq!(ds.train[0].input.data()[4096..3 * 4096], ds.test[1].input.data()[4096..3 * 4096]);
}

#[test]
fn channel_order_violation_is_rejected() {
    let s = spec(Variable::PrecipitationLike, 6);
    let fine = gen_precipitation_like(&s, Split::Train, 1).unwrap();
    let mut aux = gen_auxiliaries(&s, Split::Train, 1).unwrap();
    assert!(assemble_pairs(&fine, &aux, &s).is_ok());
    aux[0].swap(2, 3);
    assert!(matches!(assemble_pairs(&fine, &aux, &s), Err(Error::Config(_))));
    aux[0].truncate(2);
    assert!(assemble_pairs(&fine, &aux, &s).is_err());
}

#[test]
fn splits_never_share_a_field() {
    let s = DatasetSpec { n_train: 40, n_val: 20, n_test: 20, ..spec(Variable::TemperatureLike, 9) };
    let ds = generate_dataset(&s).unwrap();
    let mut seen = HashSet::new();
    for split in Split::ALL {
        for p in ds.split(split) {
            let mut h = Sha256::new();
            for v in p.target.data() {
                h.update(v.to_le_bytes());
            }
            assert!(seen.insert(h.finalize().to_vec()), "duplicate field in {split:?}");
        }
    }
    assert_eq!(seen.len(), 80);
}

#[test]
fn low_range_variant_is_rescaled() {
    let s = spec(Variable::TemperatureLowRange, 10);
    let ds = generate_dataset(&s).unwrap();
    let t: Vec<f64> = ds.train.iter().flat_map(|p| p.target.data().iter().copied()).collect();
    let n = t.len() as f64;
    let m = t.iter().sum::<f64>() / n;
    let sd = (t.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt();
    assert!((sd - 0.05).abs() < 1e-12, "{sd}");
    assert!(t.iter().all(|x| x.abs() < 1.0));
    assert_eq!(ds.train[0].input.shape()[0], 3);
}

#[test]
fn dataset_container_round_trip_and_layout() {
    let ds = generate_dataset(&DatasetSpec { n_train: 6, n_val: 2, n_test: 2, ..DatasetSpec::quick(Variable::PrecipitationLike, 11) }).unwrap();
    let bytes = dataset_to_bytes(&ds);
    let back = dataset_from_bytes(&bytes).unwrap();
    assert_eq!(back, ds);
    assert_eq!(dataset_to_bytes(&back), bytes);

    let echo = crate::container::kv_text(&ds.spec.to_kv()).len();
    let header = 8 + 4 + 4 + echo;
    let tensor = |dims: usize, n: usize| 4 + 8 * dims + 8 + 8 * n;
    let record = 8 + tensor(3, 6 * 32 * 32) + tensor(3, 32 * 32);
    assert_eq!(bytes.len(), header + 3 * 8 + 10 * record);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.bin");
    save_dataset(&ds, &path).unwrap();
    assert_eq!(load_dataset(&path).unwrap(), ds);

    let mut bad = bytes.clone();
    bad[1] = b'X';
    assert!(matches!(dataset_from_bytes(&bad), Err(Error::Format(_))));
    assert!(matches!(dataset_from_bytes(&bytes[..bytes.len() - 8]), Err(Error::Format(_))));
}

#[test]
fn spec_keys_round_trip_and_unknown_keys_fail() {
    let s = DatasetSpec::quick(Variable::TemperatureLowRange, 42);
    let mut t = DatasetSpec::desk(Variable::PrecipitationLike, 0);
    for (k, v) in s.to_kv() {
        t.set(&k, &v).unwrap();
    }
    assert_eq!(s, t);
    assert!(matches!(t.set("n_trian", "3"), Err(Error::UnknownKey(k)) if k == "n_trian"));
    assert!(DatasetSpec { height: 60, ..s.clone() }.validate().is_err());
    assert!(DatasetSpec { coarsen_factor: 32, ..s }.validate().is_err());
}
