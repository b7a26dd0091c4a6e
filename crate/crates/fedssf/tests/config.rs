mod common;

use fedssf::error::AppError;
use fedssf::ExperimentConfig;
use fedssf_core::experiment::ExperimentSpec;
use fedssf_core::norm::NormKind;

#[test]
fn defaults_match_the_core_specification() {
    assert_eq!(ExperimentConfig::default().spec().unwrap(), ExperimentSpec::default());
}

#[test]
fn toml_round_trips() {
    let cfg = common::tiny();
    let again = ExperimentConfig::from_toml(&cfg.to_toml()).unwrap();
    assert_eq!(again, cfg);
    assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
}

#[test]
fn unknown_and_invalid_fields_are_config_errors() {
    for text in [
        "[federation]\nclientz = 3",
        "[bogus]\nx = 1",
        "[federation]\nclients = 0",
        "[attack]\nkind = \"cw\"",
        "[model]\nnorm_clean = \"xx\"",
        "[federation]\npayload_dtype = \"f16\"",
        "[model]\nchannels = [3, 8]\ngn_groups = 4\nnorm_adv = \"gn\"",
        "[data]\nimage_size = 8",
        "[output]\nthreads = 0",
        "[federation]\nlambda_afl = -1.0",
        "[attack]\nkind = \"pgd\"\nstep_size = 0.5",
    ] {
        let err = ExperimentConfig::from_toml(text).unwrap_err();
        assert!(matches!(err, AppError::Config(_)), "{text}: {err:?}");
        assert_eq!(err.exit_code(), 1);
    }
}

#[test]
fn hash_tracks_everything_but_output() {
    let base = common::tiny();
    let mut moved = base.clone();
    moved.output.dir = "elsewhere".into();
    moved.output.threads = 4;
    assert_eq!(base.hash(), moved.hash());
    let mut reseeded = base.clone();
    reseeded.seeds.master += 1;
    assert_ne!(base.hash(), reseeded.hash());
    let mut relambda = base.clone();
    relambda.federation.lambda_afl = 0.5;
    assert_ne!(base.hash(), relambda.hash());
    assert_eq!(base.hash().len(), 16);
}

#[test]
fn norm_grid_defaults_to_all_pairs() {
    let cfg = common::tiny();
    let pairs = cfg.sweep.norm_pairs().unwrap();
    assert_eq!(pairs.len(), 25);
    assert!(pairs.contains(&(NormKind::Rna, NormKind::Bn)));
    let explicit = ExperimentConfig::from_toml("[sweep]\nnorm_pairs = [[\"bn\", \"rna\"]]").unwrap();
    assert_eq!(explicit.sweep.norm_pairs().unwrap(), vec![(NormKind::Bn, NormKind::Rna)]);
}

#[test]
fn overrides_reach_the_spec() {
    let cfg = ExperimentConfig::from_toml(
        "[federation]\nclient_lr = [0.01, 0.02]\nmerge_policy = \"average\"\npayload_dtype = \"f32\"\n[attack]\neval = [\"bim\"]",
    )
    .unwrap();
    let spec = cfg.spec().unwrap();
    assert_eq!(spec.federation.client_lr, vec![0.01, 0.02]);
    assert_eq!(spec.eval_attacks.len(), 1);
    assert_eq!(spec.federation.payload_dtype, fedssf_core::container::DType::F32);
}
