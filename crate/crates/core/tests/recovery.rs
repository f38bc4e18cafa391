use resmatch_core::error::LossTerm;
use resmatch_core::model::{build_model, Arch, ModelSpec, TrainedModel};
use resmatch_core::recovery::{recovery_loss, PrecisionPolicy};
use resmatch_core::{BnMode, Error, Precision, Tensor};

fn teacher() -> TrainedModel {
    build_model(ModelSpec::new(Arch::CnnS, (3, 8, 8), 4), 5).unwrap()
}

fn probe(n: usize) -> Tensor {
    let len = n * 3 * 64;
    Tensor::new(vec![n, 3, 8, 8], (0..len).map(|i| ((i * 7919 % 97) as f32 / 48.0) - 1.0).collect()).unwrap()
}

/// A teacher whose first layer copies input channel 0 into every output
/// channel, so the first batchnorm sees known statistics.
fn copying_teacher() -> TrainedModel {
    let mut t = teacher();
    let w = t.param_mut("conv1.weight").unwrap();
    let cout = w.dims()[0];
    let data = w.data_mut().unwrap();
    data.fill(0.0);
    for o in 0..cout {
        // [o, c=0, 1, 1]
        data[o * 27 + 4] = 1.0;
    }
    t.bn_running[0].mean.fill(0.5);
    t.bn_running[0].var.fill(2.0);
    t
}

#[test]
fn first_layer_residuals_match_hand_arithmetic() {
    let t = copying_teacher();
    // channel 0 is 1.0 in image 0 and 3.0 in image 1: mean 2, biased var 1
    let mut v = vec![0.0f32; 2 * 3 * 64];
    v[..64].fill(1.0);
    v[192..256].fill(3.0);
    let x = Tensor::new(vec![2, 3, 8, 8], v).unwrap();
    let (report, _) = recovery_loss(std::slice::from_ref(&t), &x, &[0, 1], 1.0, PrecisionPolicy::full32()).unwrap();
    let c = t.bn_running[0].mean.len() as f64;
    let mean_norm = (c * (2.0f64 - 0.5).powi(2)).sqrt();
    let var_norm = (c * (1.0f64 - 2.0).powi(2)).sqrt();
    assert!((report.mean_residuals[0] as f64 - mean_norm).abs() < 1e-6, "{}", report.mean_residuals[0]);
    assert!((report.var_residuals[0] as f64 - var_norm).abs() < 1e-6, "{}", report.var_residuals[0]);
    let layers: f64 = report
        .mean_residuals
        .iter()
        .chain(&report.var_residuals)
        .map(|&v| v as f64)
        .sum();
    assert!((report.d_global as f64 - layers).abs() < 1e-4);
    assert!(((report.ce + report.d_global) - report.total).abs() < 1e-6 * report.total.max(1.0));
}

#[test]
fn zero_weight_reduces_to_cross_entropy() {
    let x = probe(3);
    let (report, _) = recovery_loss(&[teacher()], &x, &[0, 1, 3], 0.0, PrecisionPolicy::full32()).unwrap();
    assert_eq!(report.total, report.ce);
    assert!(report.d_global >= 0.0);
}

#[test]
fn matched_statistics_leave_only_cross_entropy() {
    let x = probe(4);
    let mut t = teacher();
    let (_, stats) = t.forward_logits(&x, BnMode::Train, Precision::Full32).unwrap();
    for (rs, (m, v)) in t.bn_running.iter_mut().zip(stats) {
        rs.mean = m;
        rs.var = v;
    }
    let (report, _) = recovery_loss(&[t], &x, &[0, 1, 2, 3], 1.0, PrecisionPolicy::full32()).unwrap();
    assert!(report.d_global < 1e-3, "{}", report.d_global);
    assert!((report.total - report.ce).abs() < 1e-3);
}

#[test]
fn identical_teachers_match_a_single_teacher_bitwise() {
    let x = probe(2);
    let t = teacher();
    let (one, g1) = recovery_loss(std::slice::from_ref(&t), &x, &[1, 2], 1.0, PrecisionPolicy::full32()).unwrap();
    let (two, g2) = recovery_loss(&[t.clone(), t], &x, &[1, 2], 1.0, PrecisionPolicy::full32()).unwrap();
    assert_eq!(one, two);
    assert_eq!(g1, g2);
}

#[test]
fn contract_errors() {
    let t = teacher();
    let err = recovery_loss(std::slice::from_ref(&t), &probe(2), &[0, 4], 1.0, PrecisionPolicy::full32()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    let err = recovery_loss(std::slice::from_ref(&t), &probe(1), &[0], 1.0, PrecisionPolicy::full32()).unwrap_err();
    assert!(matches!(err, Error::Contract(_)), "{err}");
    assert!(recovery_loss(&[], &probe(2), &[0, 1], 1.0, PrecisionPolicy::full32()).is_err());
}

#[test]
fn non_finite_input_names_the_term_and_precision() {
    let mut x = probe(2);
    x.data_mut().unwrap()[5] = f32::NAN;
    let err = recovery_loss(&[teacher()], &x, &[0, 1], 1.0, PrecisionPolicy::mixed()).unwrap_err();
    match err {
        Error::NonFinite { term, precision } => {
            assert_eq!(term, LossTerm::CrossEntropy);
            assert_eq!(precision, Precision::Half16);
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn half_policy_halves_parameter_bytes_and_keeps_gradients_full() {
    let t = teacher();
    let half = t.cast(Precision::Half16);
    assert_eq!(half.param_bytes() * 2, t.param_bytes());
    let x = probe(2);
    let (full, _) = recovery_loss(std::slice::from_ref(&t), &x, &[0, 1], 1.0, PrecisionPolicy::full32()).unwrap();
    let (mixed, g) = recovery_loss(&[t], &x, &[0, 1], 1.0, PrecisionPolicy::mixed()).unwrap();
    assert_eq!(g.len(), x.numel());
    assert!((full.ce - mixed.ce).abs() < 0.05 * full.ce.max(1.0));
}
