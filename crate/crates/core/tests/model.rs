use fedssf_core::attack::AttackTarget;
use fedssf_core::model::{afl_term, ssf_apply, MergePolicy, ModelConfig, ModelParams, Objective, Path, Trainable, POSE_OUTPUTS};
use fedssf_core::norm::{NormKind, NormMode, NormSpec};
use fedssf_core::rng::{self, stream_rng, SimRng};
use fedssf_core::{Error, Tape, Tensor};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn uniform(rng: &mut SimRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    t(shape, &(0..n).map(|_| rng::uniform(rng)).collect::<Vec<_>>())
}

fn small_config(clean: NormKind, adversarial: NormKind) -> ModelConfig {
    ModelConfig {
        image_size: 16,
        channels: vec![4, 8],
        norm: NormSpec { clean, adversarial, gn_groups: 2, ..NormSpec::default() },
        ..ModelConfig::default()
    }
}

fn randomize_ssf(model: &mut ModelParams, rng: &mut SimRng) {
    for p in &mut model.phi.points {
        for x in [&mut p.gamma_cl, &mut p.beta_cl, &mut p.gamma_adv, &mut p.beta_adv] {
            x.data_mut().iter_mut().for_each(|v| *v += 0.5 * rng::normal(rng));
        }
    }
    let head = &mut model.phi.head;
    head.weight.data_mut().iter_mut().for_each(|v| *v = 0.3 * rng::normal(rng));
}

/// Model with calibrated statistics on both paths, in eval mode.
fn calibrated(config: ModelConfig, seed: u64) -> ModelParams {
    let mut rng = stream_rng(seed, &[1]);
    let mut m = ModelParams::init(config, Trainable::default(), &mut rng).unwrap();
    randomize_ssf(&mut m, &mut rng);
    let x = uniform(&mut rng, &[16, 3, 16, 16]);
    m.calibrate(&x, Path::Clean).unwrap();
    let xa = uniform(&mut rng, &[16, 3, 16, 16]);
    m.calibrate(&xa, Path::Adversarial).unwrap();
    m.set_mode(NormMode::Eval);
    m
}

#[test]
fn ssf_apply_examples() {
    let x = t(&[1, 2, 1, 2], &[0.5, -1.0, 2.0, 3.0]);
    let id = ssf_apply(&x, &Tensor::ones(&[2]), &Tensor::zeros(&[2])).unwrap();
    assert_eq!(id.data(), x.data());

    let y = ssf_apply(&t(&[1, 1, 1, 2], &[0.5, 1.0]), &t(&[1], &[2.0]), &t(&[1], &[-1.0])).unwrap();
    assert_eq!(y.data(), &[0.0, 1.0]);

    let c = ssf_apply(&x, &Tensor::zeros(&[2]), &t(&[2], &[0.25, -4.0])).unwrap();
    assert_eq!(c.data(), &[0.25, 0.25, -4.0, -4.0]);

    assert!(matches!(ssf_apply(&x, &Tensor::ones(&[3]), &Tensor::zeros(&[3])), Err(Error::Dimension { .. })));
}

fn afl_value(clean: &[Tensor], adv: &[Tensor]) -> f64 {
    let mut tape = Tape::new();
    let c: Vec<_> = clean.iter().map(|x| tape.constant(x.clone())).collect();
    let a: Vec<_> = adv.iter().map(|x| tape.constant(x.clone())).collect();
    let v = afl_term(&mut tape, &c, &a).unwrap();
    tape.value(v).item().unwrap()
}

#[test]
fn alignment_loss_examples() {
    let f = t(&[1, 1, 1, 1], &[1.0]);
    let clean = ssf_apply(&f, &t(&[1], &[2.0]), &t(&[1], &[0.0])).unwrap();
    let adv = ssf_apply(&f, &t(&[1], &[1.0]), &t(&[1], &[0.0])).unwrap();
    assert_eq!(afl_value(&[clean], &[adv]), 1.0);

    let mut rng = stream_rng(4, &[]);
    let a = uniform(&mut rng, &[2, 3, 2, 2]);
    let b = uniform(&mut rng, &[2, 3, 2, 2]);
    let single = afl_value(std::slice::from_ref(&a), std::slice::from_ref(&b));
    let doubled = afl_value(&[Tensor::stack(&[&a, &a]).unwrap().reshape(&[4, 3, 2, 2]).unwrap()], &[Tensor::stack(&[&b, &b])
        .unwrap()
        .reshape(&[4, 3, 2, 2])
        .unwrap()]);
    assert!((single - doubled).abs() < 1e-12);
    assert_eq!(afl_value(std::slice::from_ref(&a), std::slice::from_ref(&b)), afl_value(&[b], &[a]));
}

#[test]
fn alignment_loss_vanishes_for_identical_streams() {
    let mut rng = stream_rng(5, &[]);
    let mut m = ModelParams::init(small_config(NormKind::Bn, NormKind::Bn), Trainable::default(), &mut rng).unwrap();
    let x = uniform(&mut rng, &[4, 3, 16, 16]);
    assert_eq!(m.afl_loss(&x, &x, &mut rng).unwrap(), 0.0);
    let short = uniform(&mut rng, &[3, 3, 16, 16]);
    assert!(matches!(m.afl_loss(&x, &short, &mut rng), Err(Error::Contract(_))));
}

#[test]
fn task_loss_example() {
    let mut tape = Tape::new();
    let p = tape.constant(Tensor::zeros(&[1, 6]));
    let y = tape.constant(t(&[1, 6], &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]));
    let l = tape.mse(p, y).unwrap();
    assert!((tape.value(l).item().unwrap() - 1.0 / 6.0).abs() < 1e-15);
}

#[test]
fn perfect_predictions_give_zero_loss() {
    let mut rng = stream_rng(6, &[]);
    let mut m = ModelParams::init(small_config(NormKind::Bn, NormKind::Bn), Trainable::default(), &mut rng).unwrap();
    let label = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
    m.phi.head.weight = Tensor::zeros(m.phi.head.weight.shape());
    m.phi.head.bias = t(&[6], &label);
    let x = uniform(&mut rng, &[3, 3, 16, 16]);
    let y = t(&[3, 6], &label.repeat(3));
    let objective = Objective { adversarial: true, lambda_afl: 0.5 };
    let (parts, _) = m.loss_and_grads(&x, Some(&x), &y, objective, &mut rng).unwrap();
    assert_eq!(parts.total, 0.0);
}

#[test]
fn zero_lambda_is_sum_of_task_losses() {
    let mut rng = stream_rng(7, &[]);
    let mut m = ModelParams::init(small_config(NormKind::Bn, NormKind::Rna), Trainable::default(), &mut rng).unwrap();
    randomize_ssf(&mut m, &mut rng);
    let x = uniform(&mut rng, &[4, 3, 16, 16]);
    let xa = uniform(&mut rng, &[4, 3, 16, 16]);
    let y = uniform(&mut rng, &[4, 6]);
    let objective = Objective { adversarial: true, lambda_afl: 0.0 };
    let (parts, _) = m.clone().loss_and_grads(&x, Some(&xa), &y, objective, &mut stream_rng(9, &[])).unwrap();

    let mut r = stream_rng(9, &[]);
    let pc = m.forward(&x, Path::Clean, &mut r).unwrap();
    let pa = m.forward(&xa, Path::Adversarial, &mut r).unwrap();
    let mse = |p: &Tensor| p.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / p.numel() as f64;
    assert!((parts.total - (mse(&pc) + mse(&pa))).abs() < 1e-12);
    assert!((parts.task_clean - mse(&pc)).abs() < 1e-12);
}

#[test]
fn label_shape_is_checked() {
    let mut rng = stream_rng(8, &[]);
    let mut m = ModelParams::init(small_config(NormKind::Bn, NormKind::Bn), Trainable::default(), &mut rng).unwrap();
    let x = uniform(&mut rng, &[2, 3, 16, 16]);
    let bad = Tensor::zeros(&[2, 5]);
    let r = m.loss_and_grads(&x, Some(&x), &bad, Objective { adversarial: true, lambda_afl: 0.1 }, &mut rng);
    assert!(matches!(r, Err(Error::Dimension { .. })));
}

#[test]
fn paths_agree_at_initialization() {
    let mut rng = stream_rng(10, &[]);
    let mut m = ModelParams::init(small_config(NormKind::Bn, NormKind::Bn), Trainable::default(), &mut rng).unwrap();
    let x = uniform(&mut rng, &[3, 3, 16, 16]);
    let a = m.forward(&x, Path::Clean, &mut rng).unwrap();
    let b = m.forward(&x, Path::Adversarial, &mut rng).unwrap();
    assert!(a.bitwise_eq(&b));
    assert_eq!(a.shape(), &[3, POSE_OUTPUTS]);
}

#[test]
fn eval_forward_is_deterministic_and_needs_statistics() {
    let mut rng = stream_rng(11, &[]);
    let mut m = ModelParams::init(small_config(NormKind::Bn, NormKind::Rna), Trainable::default(), &mut rng).unwrap();
    let x = uniform(&mut rng, &[2, 3, 16, 16]);
    m.set_mode(NormMode::Eval);
    assert!(matches!(m.predict(&x, Path::Clean), Err(Error::UninitializedStatistics)));
    let m = calibrated(small_config(NormKind::Bn, NormKind::Rna), 11);
    assert!(m.predict(&x, Path::Clean).unwrap().bitwise_eq(&m.predict(&x, Path::Clean).unwrap()));
}

#[test]
fn identity_ssf_equals_plain_backbone() {
    let mut rng = stream_rng(12, &[]);
    let with = ModelParams::init(small_config(NormKind::Bn, NormKind::Rna), Trainable::default(), &mut rng).unwrap();
    let mut without = with.clone();
    without.trainable = Trainable { ssf: false, dual: true };
    let x = uniform(&mut rng, &[3, 3, 16, 16]);
    for path in [Path::Clean, Path::Adversarial] {
        let a = with.clone().forward(&x, path, &mut stream_rng(1, &[])).unwrap();
        let b = without.clone().forward(&x, path, &mut stream_rng(1, &[])).unwrap();
        assert_eq!(a.data(), b.data());
    }
}

#[test]
fn merge_matches_wrapped_forward() {
    let kinds = [(NormKind::Bn, NormKind::Rna), (NormKind::Ln, NormKind::Gn), (NormKind::In, NormKind::Bn)];
    for (k, &(clean, adv)) in kinds.iter().enumerate() {
        let m = calibrated(small_config(clean, adv), 20 + k as u64);
        let mut rng = stream_rng(30 + k as u64, &[]);
        for policy in [MergePolicy::Clean, MergePolicy::Adversarial, MergePolicy::Average] {
            let merged = m.merge_ssf(policy).unwrap();
            let (reference, path) = match policy {
                MergePolicy::Clean => (m.clone(), Path::Clean),
                MergePolicy::Adversarial => (m.clone(), Path::Adversarial),
                MergePolicy::Average => (m.with_ssf_values(MergePolicy::Average), Path::Clean),
            };
            let x = uniform(&mut rng, &[100, 3, 16, 16]);
            let diff = merged.predict(&x).unwrap().max_abs_diff(&reference.predict(&x, path).unwrap()).unwrap();
            assert!(diff < 1e-9, "{clean}/{adv} {policy:?}: {diff}");
        }
    }
}

#[test]
fn identity_merge_is_bitwise() {
    let mut m = calibrated(small_config(NormKind::Bn, NormKind::Rna), 40);
    for p in &mut m.phi.points {
        let c = p.gamma_cl.numel();
        p.gamma_cl = Tensor::ones(&[c]);
        p.beta_cl = Tensor::zeros(&[c]);
    }
    let merged = m.merge_ssf(MergePolicy::Clean).unwrap();
    let x = uniform(&mut stream_rng(41, &[]), &[8, 3, 16, 16]);
    assert!(merged.predict(&x).unwrap().bitwise_eq(&m.predict(&x, Path::Clean).unwrap()));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let out = merged.predict_on(&mut tape, xv).unwrap();
    assert!(tape.value(out).bitwise_eq(&merged.predict(&x).unwrap()));
}

#[test]
fn merged_model_carries_no_extra_parameters_for_batch_norm() {
    let m = calibrated(ModelConfig { norm: NormSpec { clean: NormKind::Bn, adversarial: NormKind::Bn, ..NormSpec::default() }, ..small_config(NormKind::Bn, NormKind::Bn) }, 42);
    let merged = m.merge_ssf(MergePolicy::Clean).unwrap();
    let head = m.phi.head.weight.numel() + m.phi.head.bias.numel();
    let per_channel_affine: usize = m.config.channels.iter().map(|c| 2 * c).sum();
    assert_eq!(merged.param_count(), m.backbone.theta_count() + head + per_channel_affine);
}

#[test]
fn merge_requires_eval_mode() {
    let mut m = calibrated(small_config(NormKind::Bn, NormKind::Rna), 43);
    m.set_mode(NormMode::Train);
    assert!(matches!(m.merge_ssf(MergePolicy::Clean), Err(Error::Contract(_))));
}

#[test]
fn default_trainable_ratio_is_small() {
    let m = ModelParams::init(ModelConfig::default(), Trainable::default(), &mut stream_rng(0, &[])).unwrap();
    let ratio = m.trainable_count() as f64 / m.backbone.theta_count() as f64;
    assert!(ratio < 0.15, "ratio {ratio}");
    assert_eq!(m.backbone.theta_count(), 6032);
    assert_eq!(m.trainable_count(), 806);
}

#[test]
fn adversarial_forwards_leave_clean_statistics_untouched() {
    let mut m = calibrated(small_config(NormKind::Bn, NormKind::Rna), 50);
    m.set_mode(NormMode::Train);
    let before: Vec<_> = m.backbone.norms.iter().map(|p| p.clean.clone()).collect();
    let mut rng = stream_rng(51, &[]);
    for _ in 0..5 {
        let x = uniform(&mut rng, &[4, 3, 16, 16]);
        m.forward(&x, Path::Adversarial, &mut rng).unwrap();
    }
    let after: Vec<_> = m.backbone.norms.iter().map(|p| p.clean.clone()).collect();
    assert_eq!(before, after);
    let x = uniform(&mut rng, &[4, 3, 16, 16]);
    m.forward(&x, Path::Clean, &mut rng).unwrap();
    let moved: Vec<_> = m.backbone.norms.iter().map(|p| p.clean.clone()).collect();
    assert_ne!(before, moved);
}

#[test]
fn trainable_payload_excludes_backbone() {
    let m = ModelParams::init(ModelConfig::default(), Trainable::default(), &mut stream_rng(0, &[])).unwrap();
    assert!(m.trainable_names().iter().all(|n| !n.starts_with("theta")));
    let full = ModelParams { trainable: Trainable { ssf: false, dual: false }, ..m };
    assert!(full.trainable_names().iter().any(|n| n.starts_with("theta")));
    assert_eq!(full.trainable_count(), full.full_model_count());
}
