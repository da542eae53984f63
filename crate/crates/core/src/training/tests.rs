use super::*;
use crate::data::{generate_dataset, DatasetSpec, Variable};
use crate::losses::LossKind;
use crate::model::UNetConfig;
use crate::preprocessing::GammaMode;
use crate::tensor::{Tape, Tensor};

fn tiny_data(variable: Variable) -> crate::data::Dataset {
    generate_dataset(&DatasetSpec {
        n_train: 8,
        n_val: 4,
        n_test: 4,
        height: 16,
        width: 16,
        coarsen_factor: 4,
        ..DatasetSpec::quick(variable, 3)
    })
    .unwrap()
}

fn tiny_spec(loss: LossKind, preproc: GammaMode, in_ch: usize) -> ExperimentSpec {
    let mut m = UNetConfig::quick(in_ch);
    m.base_width = 4;
    ExperimentSpec::new(loss, preproc, m, TrainConfig { epochs: 3, batch_size: 4, ..TrainConfig::quick(1) })
}

#[test]
fn labels_follow_the_table_rows() {
    let base = tiny_spec(LossKind::L1, GammaMode::None, 6);
    let labels: Vec<String> = matrix_specs(&base, &[0]).iter().map(|s| s.label()).collect();
    assert_eq!(labels, ["L1", "L2", "L1+NL2.2", "L1+Learn", "L2+NL2.2", "L2+Learn"]);
}

#[test]
fn training_is_deterministic_and_records_history() {
    let data = tiny_data(Variable::PrecipitationLike);
    let spec = tiny_spec(LossKind::L2, GammaMode::Learnable, 6);
    let a = train::<f64>(&spec, &data, None).unwrap();
    let b = train::<f64>(&spec, &data, None).unwrap();
    assert_eq!(a.history.epochs.len(), 3);
    assert!(a.history.same_results(&b.history));
    assert_eq!(a.best, b.best);
    assert_eq!(a.final_gamma.to_bits(), b.final_gamma.to_bits());
    assert_eq!(a.history.gamma_trajectory().len(), 3);
    assert!(a.history.gamma_trajectory().iter().all(|&g| g > 0.0 && g != 1.0));
    let ta = evaluate_checkpoint(&a.best, &data.test, 4).unwrap();
    let tb = evaluate_checkpoint(&b.best, &data.test, 4).unwrap();
    assert_eq!(ta, tb);
}

#[test]
fn gamma_receives_gradient_at_initialization() {
    let data = tiny_data(Variable::PrecipitationLike);
    let spec = tiny_spec(LossKind::L1, GammaMode::Learnable, 6);
    let inputs: Vec<Tensor<f64>> = data.train.iter().map(|p| p.input.clone()).collect();
    let targets: Vec<Tensor<f64>> = data.train.iter().map(|p| p.target.clone()).collect();
    let pipeline = crate::preprocessing::Pipeline::fit(
        crate::preprocessing::GammaTransform::learnable(1.0, vec![0]).unwrap(),
        spec.placement,
        &inputs.iter().collect::<Vec<_>>(),
        &targets.iter().collect::<Vec<_>>(),
    )
    .unwrap();
    let mut model = crate::model::build_unet::<f64>(&spec.model, 0).unwrap();
    let mut tape = Tape::new();
    let theta = tape.param(Tensor::scalar(0.0));
    let x = tape.constant(Tensor::stack(&inputs[..4].iter().collect::<Vec<_>>(), false).unwrap());
    let y = tape.constant(Tensor::stack(&targets[..4].iter().collect::<Vec<_>>(), false).unwrap());
    let xin = pipeline.input_on_tape(&mut tape, x, Some(theta)).unwrap();
    let (pred, _) = model.forward_on_tape(&mut tape, xin, crate::tensor::NormMode::Train, true).unwrap();
    let yt = pipeline.target_on_tape(&mut tape, y, Some(theta)).unwrap();
    let l = crate::losses::l1_loss(&mut tape, pred, yt).unwrap();
    tape.backward(l).unwrap();
    assert!(tape.grad(theta).unwrap()[0].abs() > 0.0);
}

#[test]
fn checkpoint_round_trip_reproduces_metrics() {
    let data = tiny_data(Variable::TemperatureLike);
    let spec = tiny_spec(LossKind::L1, GammaMode::Fixed, 3);
    let out = train::<f64>(&spec, &data, None).unwrap();
    let before = evaluate_checkpoint(&out.best, &data.test, 4).unwrap();
    let back = crate::checkpoint::Checkpoint::<f64>::from_bytes(&out.best.to_bytes()).unwrap();
    let after = evaluate_checkpoint(&back, &data.test, 4).unwrap();
    assert_eq!(before, after);
}

#[test]
fn mismatched_channels_are_a_config_error() {
    let data = tiny_data(Variable::TemperatureLike);
    let spec = tiny_spec(LossKind::L1, GammaMode::None, 6);
    assert!(matches!(train::<f64>(&spec, &data, None), Err(crate::Error::Config(_))));
}

#[test]
fn divergence_is_reported_with_its_epoch() {
    let data = tiny_data(Variable::PrecipitationLike);
    let mut spec = tiny_spec(LossKind::L2, GammaMode::None, 6);
    spec.train.adam.lr = 1e300;
    match train::<f64>(&spec, &data, None) {
        Err(crate::Error::Divergence { epoch, .. }) => assert!(epoch >= 1),
        Err(crate::Error::NonFiniteGradient { .. }) => {}
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history)),
    }
}

#[test]
fn matrix_marks_failed_cells_and_keeps_order() {
    let data = tiny_data(Variable::PrecipitationLike);
    let mut base = tiny_spec(LossKind::L1, GammaMode::None, 6);
    base.train.epochs = 1;
    let mut specs = matrix_specs(&base, &[5]);
    specs[1].train.adam.lr = 1e300;
    let serial = run_cells::<f64>("precipitation_like", &specs, &data, 1, &|_, _| {});
    let parallel = run_cells::<f64>("precipitation_like", &specs, &data, 3, &|_, _| {});
    assert_eq!(serial.to_csv(), parallel.to_csv());
    assert!(serial.any_failed());
    assert!(serial.rows[1].outcome.is_err());
    let csv = serial.to_csv();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 7);
    assert!(lines[0].starts_with("method,avg_abs_diff,avg_mse,avg_abs_diff_transformed,avg_mse_transformed,gamma_final,seed"));
    assert!(lines[2].starts_with("L2,,,,,,5,failed"));
    let text = serial.to_text();
    assert!(text.contains("FAILED"));
}
