mod common;

use fedssf::error::AppError;
use fedssf::io;
use fedssf::pipeline::Runner;
use fedssf_core::container::DecodeError;
use fedssf_core::model::Path as ModelPath;

#[test]
fn checkpoint_round_trip_is_byte_identical() {
    let cfg = common::tiny();
    let spec = cfg.spec().unwrap();
    let out = Runner::new(1).run(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.fssf");
    let b = dir.path().join("b.fssf");
    io::save_checkpoint(&out.central, &a).unwrap();
    let loaded = io::load_checkpoint(&a, &spec.model, spec.trainable()).unwrap();
    io::save_checkpoint(&loaded, &b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(loaded, out.central);

    let (x, _) = fedssf_core::experiment::runway_splits(spec.seed, &spec.data).unwrap().test.all().unwrap();
    assert!(loaded.predict(&x, ModelPath::Clean).unwrap().bitwise_eq(&out.central.predict(&x, ModelPath::Clean).unwrap()));
}

#[test]
fn checkpoint_groups_are_named() {
    let cfg = common::tiny();
    let spec = cfg.spec().unwrap();
    let out = Runner::new(1).run(&spec).unwrap();
    let names: Vec<String> = io::model_arrays(&out.central).unwrap().into_iter().map(|(n, _)| n).collect();
    for group in ["theta", "gamma_cl", "beta_cl", "gamma_adv", "beta_adv", "head", "stats"] {
        assert!(names.iter().any(|n| n.split('/').next() == Some(group)), "missing {group}");
    }
    assert!(names.contains(&"stats/clean/0/mean".to_string()));
    assert!(names.contains(&"stats/adversarial/1/1/var".to_string()) || names.contains(&"stats/adversarial/1/0/var".to_string()));
}

#[test]
fn tampering_is_detected() {
    let cfg = common::tiny();
    let spec = cfg.spec().unwrap();
    let out = Runner::new(1).run(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.fssf");
    io::save_checkpoint(&out.central, &p).unwrap();
    let mut bytes = std::fs::read(&p).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&p, &bytes).unwrap();
    let err = io::load_checkpoint(&p, &spec.model, spec.trainable()).unwrap_err();
    assert!(matches!(err, AppError::Decode { source: DecodeError::Checksum { .. }, .. }), "{err:?}");
    assert_eq!(err.exit_code(), 3);
}

#[test]
fn mismatched_architecture_is_a_config_error() {
    let cfg = common::tiny();
    let spec = cfg.spec().unwrap();
    let out = Runner::new(1).run(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.fssf");
    io::save_checkpoint(&out.central, &p).unwrap();
    let mut other = spec.model.clone();
    other.channels = vec![4, 4];
    assert!(matches!(io::load_checkpoint(&p, &other, spec.trainable()), Err(AppError::Config(_))));
    assert!(matches!(io::load_checkpoint(&dir.path().join("missing"), &spec.model, spec.trainable()), Err(AppError::Io { .. })));
}

#[test]
fn backbone_and_dataset_round_trip() {
    let cfg = common::tiny();
    let spec = cfg.spec().unwrap();
    let pre = fedssf_core::experiment::pretrain(spec.seed, &spec.model, &spec.data, &spec.pretrain).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bb.fssf");
    io::save_backbone(&pre, &p).unwrap();
    assert_eq!(io::load_backbone(&p, &spec.model).unwrap(), pre);

    let test = fedssf_core::experiment::runway_splits(spec.seed, &spec.data).unwrap().test;
    let q = dir.path().join("nested/test.fssf");
    io::save_dataset(&test, &q).unwrap();
    assert_eq!(io::load_dataset(&q).unwrap(), test);
}
