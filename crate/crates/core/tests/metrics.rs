use rand::Rng;
use resmatch_core::data::{gen_synthetic, SyntheticSpec};
use resmatch_core::metrics::{cost_report, entropy_bound, feature_entropy, mro_cost_ratio, pixel_entropy};
use resmatch_core::model::{build_model, Arch, ModelSpec};
use resmatch_core::{rng, Tensor};

#[test]
fn uniform_bytes_have_eight_bits() {
    // every one of the 256 levels appears equally often
    let v: Vec<f32> = (0..3 * 64 * 64).map(|i| (i % 256) as f32 / 255.0).collect();
    let t = Tensor::new(vec![1, 3, 64, 64], v).unwrap();
    assert!((pixel_entropy(&t, 256).unwrap() - 8.0).abs() < 1e-9);

    let mut r = rng::stream(1, &[]);
    let v: Vec<f32> = (0..3 * 128 * 128).map(|_| r.gen_range(0.0..1.0)).collect();
    let t = Tensor::new(vec![1, 3, 128, 128], v).unwrap();
    assert!((pixel_entropy(&t, 256).unwrap() - 8.0).abs() < 0.05);
}

#[test]
fn identical_images_have_zero_feature_entropy() {
    let model = build_model(ModelSpec::new(Arch::CnnS, (3, 16, 16), 4), 0).unwrap();
    let one: Vec<f32> = (0..768).map(|i| (i % 17) as f32 * 0.1).collect();
    let batch = Tensor::new(vec![3, 3, 16, 16], one.repeat(3)).unwrap();
    assert_eq!(feature_entropy(&model, &batch).unwrap(), 0.0);
}

#[test]
fn entropy_bound_is_capped_and_linear() {
    let spec = SyntheticSpec {
        num_classes: 4,
        per_class: 5,
        size: 16,
    };
    let (train, _) = gen_synthetic(0, spec).unwrap();
    for (arch, seed) in [(Arch::CnnS, 0), (Arch::CnnM, 1), (Arch::CnnL, 2)] {
        let model = build_model(ModelSpec::new(arch, (3, 16, 16), 4), seed).unwrap();
        let one = entropy_bound(&model, &train, 1).unwrap();
        assert!(one.h_max_nats <= 4f64.ln() + 1e-12);
        for n in [2, 10, 40] {
            let b = entropy_bound(&model, &train, n).unwrap();
            assert_eq!(b.bound_nats, n as f64 * one.h_max_nats);
        }
    }
}

#[test]
fn analytic_and_measured_cost_agree() {
    let r = (200.0f64 / 224.0).powi(2);
    assert!((mro_cost_ratio(2000, 3, 500, r).unwrap() - 0.8986).abs() < 1e-4);
    let spec = ModelSpec::new(Arch::CnnM, (3, 32, 32), 10);
    let rep = cost_report(&spec, 2000, 3, 24, 32).unwrap();
    assert!((rep.measured_ratio / rep.analytic_ratio - 1.0).abs() < 0.1);
    let flat = cost_report(&spec, 2000, 3, 32, 32).unwrap();
    assert_eq!(flat.analytic_ratio, 1.0);
    assert_eq!(flat.measured_ratio, 1.0);
}
