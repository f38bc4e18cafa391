use resmatch_core::data::{gen_synthetic, SyntheticSpec};
use resmatch_core::distill::{distill, init_patches, DistillConfig};
use resmatch_core::io::{load_distilled, read_ppm, write_distilled, DatasetRecord, RunManifest, TeacherRecord};
use resmatch_core::model::{build_model, Arch, ModelSpec};

#[test]
fn distilled_directory_round_trips() {
    let spec = SyntheticSpec {
        num_classes: 2,
        per_class: 10,
        size: 16,
    };
    let (train, _) = gen_synthetic(2, spec).unwrap();
    let teacher = build_model(ModelSpec::new(Arch::CnnS, (3, 16, 16), 2), 3).unwrap();
    let cfg = DistillConfig {
        budget: 4,
        k: 1,
        d_ds: 8,
        d_orig: 16,
        ipc: 2,
        candidates: 1,
        ..DistillConfig::default()
    };
    let bank = init_patches(&train, &teacher, &cfg).unwrap();
    let set = distill(&cfg, std::slice::from_ref(&teacher), &bank).unwrap();
    let manifest = RunManifest::new(
        &set,
        &bank,
        vec![TeacherRecord::new("teacher", &teacher)],
        DatasetRecord::new(&train),
        0.0,
    );
    let dir = tempfile::tempdir().unwrap();
    let written = write_distilled(dir.path(), &set, &manifest).unwrap();
    assert_eq!(written.images.len(), 4);
    assert!(dir.path().join("traces/slot0-c0-1.csv").exists());

    let (loaded, images) = load_distilled(dir.path()).unwrap();
    assert_eq!(loaded, written);
    assert_eq!(images, set.images);
    assert_eq!(DistillConfig::parse(&loaded.config_text).unwrap(), cfg);

    let (w, h, rgb) = read_ppm(dir.path().join(&loaded.images[0].ppm)).unwrap();
    assert_eq!((w, h, rgb.len()), (16, 16, 3 * 256));
}

#[test]
fn missing_manifest_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let err = load_distilled(dir.path()).unwrap_err();
    assert!(err.to_string().contains("manifest.json"), "{err}");
}
