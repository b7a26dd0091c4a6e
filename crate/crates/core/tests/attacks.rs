use fedssf_core::attack::{self, AttackConfig, AttackKind, AttackTarget};
use fedssf_core::model::{MergePolicy, MergedModel, ModelConfig, ModelParams, Path, PathView, Trainable};
use fedssf_core::norm::{NormKind, NormMode, NormSpec};
use fedssf_core::rng::{self, stream_rng, SimRng};
use fedssf_core::Tensor;

fn uniform(rng: &mut SimRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng::uniform(rng)).collect()).unwrap()
}

fn target(seed: u64) -> ModelParams {
    let config = ModelConfig {
        image_size: 16,
        channels: vec![4, 8],
        norm: NormSpec { clean: NormKind::Bn, adversarial: NormKind::Rna, gn_groups: 2, ..NormSpec::default() },
        head_init_std: 0.3,
        ..ModelConfig::default()
    };
    let mut rng = stream_rng(seed, &[]);
    let mut m = ModelParams::init(config, Trainable::default(), &mut rng).unwrap();
    m.calibrate(&uniform(&mut rng, &[16, 3, 16, 16]), Path::Clean).unwrap();
    m.calibrate(&uniform(&mut rng, &[16, 3, 16, 16]), Path::Adversarial).unwrap();
    m.set_mode(NormMode::Eval);
    m
}

fn merged(seed: u64) -> MergedModel {
    target(seed).merge_ssf(MergePolicy::Clean).unwrap()
}

fn loss(t: &dyn AttackTarget, x: &Tensor, y: &Tensor) -> f64 {
    let mut tape = fedssf_core::Tape::new();
    let xv = tape.constant(x.clone());
    let p = t.predict_on(&mut tape, xv).unwrap();
    let yv = tape.constant(y.clone());
    let l = tape.mse(p, yv).unwrap();
    tape.value(l).item().unwrap()
}

fn max_dev(a: &Tensor, b: &Tensor) -> f64 {
    a.max_abs_diff(b).unwrap()
}

#[test]
fn random_configs_respect_budget_and_range() {
    let model = merged(1);
    let mut cfg_rng = stream_rng(2, &[]);
    for case in 0..50u64 {
        let kind = [AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Bim][rng::index(&mut cfg_rng, 3)];
        let epsilon = 0.1 * rng::uniform(&mut cfg_rng);
        let iterations = 1 + rng::index(&mut cfg_rng, 5);
        let cfg = AttackConfig {
            kind,
            epsilon,
            step_size: epsilon * (0.1 + 0.9 * rng::uniform(&mut cfg_rng)),
            iterations,
            random_start: rng::uniform(&mut cfg_rng) < 0.5,
            clamp: (0.0, 1.0),
        };
        let mut data_rng = stream_rng(3, &[case]);
        let x = uniform(&mut data_rng, &[2, 3, 16, 16]);
        let y = uniform(&mut data_rng, &[2, 6]);
        let a = attack::generate(&model, &x, &y, &cfg, &mut data_rng).unwrap();
        assert!(max_dev(&a, &x) <= epsilon + 1e-12, "case {case}: {cfg:?}");
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}

#[test]
fn single_step_pgd_equals_fgsm() {
    let model = merged(4);
    let mut rng = stream_rng(5, &[]);
    let x = uniform(&mut rng, &[3, 3, 16, 16]);
    let y = uniform(&mut rng, &[3, 6]);
    let eps = 8.0 / 255.0;
    let f = attack::fgsm(&model, &x, &y, &AttackConfig { epsilon: eps, ..AttackConfig::default() }).unwrap();
    let p_cfg = AttackConfig { kind: AttackKind::Pgd, epsilon: eps, step_size: eps, iterations: 1, random_start: false, clamp: (0.0, 1.0) };
    let p = attack::pgd(&model, &x, &y, &p_cfg, &mut rng).unwrap();
    assert!(p.bitwise_eq(&f));
}

#[test]
fn bim_is_pgd_without_random_start() {
    let model = merged(6);
    let mut rng = stream_rng(7, &[]);
    let x = uniform(&mut rng, &[2, 3, 16, 16]);
    let y = uniform(&mut rng, &[2, 6]);
    let cfg = AttackConfig { kind: AttackKind::Bim, iterations: 4, ..AttackConfig::default() };
    let b = attack::bim(&model, &x, &y, &cfg, &mut stream_rng(1, &[])).unwrap();
    let p = attack::pgd(&model, &x, &y, &AttackConfig { random_start: false, ..cfg }, &mut stream_rng(2, &[])).unwrap();
    assert!(b.bitwise_eq(&p));
}

#[test]
fn zero_budget_is_identity_for_every_kind() {
    let model = merged(8);
    let mut rng = stream_rng(9, &[]);
    let x = uniform(&mut rng, &[2, 3, 16, 16]);
    let y = uniform(&mut rng, &[2, 6]);
    for kind in [AttackKind::None, AttackKind::Fgsm, AttackKind::Pgd, AttackKind::Bim] {
        let cfg = AttackConfig { kind, epsilon: 0.0, ..AttackConfig::default() };
        assert!(attack::generate(&model, &x, &y, &cfg, &mut rng).unwrap().bitwise_eq(&x), "{kind:?}");
    }
}

#[test]
fn every_pgd_iterate_stays_in_the_ball() {
    let model = merged(10);
    let mut rng = stream_rng(11, &[]);
    let x = uniform(&mut rng, &[2, 3, 16, 16]);
    let y = uniform(&mut rng, &[2, 6]);
    let cfg = AttackConfig { kind: AttackKind::Pgd, iterations: 10, ..AttackConfig::default() };
    let mut seen = 0;
    attack::pgd_observed(&model, &x, &y, &cfg, &mut rng, &mut |a| {
        seen += 1;
        assert!(max_dev(a, &x) <= cfg.epsilon + 1e-12);
        assert!(a.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    })
    .unwrap();
    assert_eq!(seen, cfg.iterations + 1);
}

#[test]
fn custom_clamp_range_is_respected() {
    let model = merged(12);
    let mut rng = stream_rng(13, &[]);
    let x = uniform(&mut rng, &[2, 3, 16, 16]);
    let y = uniform(&mut rng, &[2, 6]);
    let cfg = AttackConfig { kind: AttackKind::Pgd, epsilon: 0.2, step_size: 0.05, clamp: (0.2, 0.8), ..AttackConfig::default() };
    let a = attack::generate(&model, &x, &y, &cfg, &mut rng).unwrap();
    assert!(a.data().iter().all(|&v| (0.2..=0.8).contains(&v)));
}

#[test]
fn attacks_raise_the_loss() {
    let model = merged(14);
    let mut rng = stream_rng(15, &[]);
    let x = uniform(&mut rng, &[8, 3, 16, 16]);
    let y = uniform(&mut rng, &[8, 6]);
    let clean = loss(&model, &x, &y);
    let mut previous = clean;
    for eps in [1.0, 2.0, 4.0, 8.0].map(|k| k / 255.0) {
        let cfg = AttackConfig { kind: AttackKind::Pgd, epsilon: eps, step_size: eps / 4.0, iterations: 10, random_start: false, clamp: (0.0, 1.0) };
        let adv = loss(&model, &attack::generate(&model, &x, &y, &cfg, &mut rng).unwrap(), &y);
        assert!(adv > previous, "eps {eps}: {adv} <= {previous}");
        previous = adv;
    }
    let f = attack::fgsm(&model, &x, &y, &AttackConfig::default()).unwrap();
    assert!(loss(&model, &f, &y) > clean);
}

#[test]
fn attacking_does_not_touch_the_model() {
    let m = target(16);
    let before = m.clone();
    let mut rng = stream_rng(17, &[]);
    let x = uniform(&mut rng, &[2, 3, 16, 16]);
    let y = uniform(&mut rng, &[2, 6]);
    let cfg = AttackConfig { kind: AttackKind::Pgd, iterations: 3, ..AttackConfig::default() };
    attack::generate(&PathView { model: &m, path: Path::Clean }, &x, &y, &cfg, &mut rng).unwrap();
    assert_eq!(m, before);
}

#[test]
fn merged_and_wrapped_clean_path_give_the_same_adversary() {
    let m = target(18);
    let merged = m.merge_ssf(MergePolicy::Clean).unwrap();
    let mut rng = stream_rng(19, &[]);
    let x = uniform(&mut rng, &[2, 3, 16, 16]);
    let y = uniform(&mut rng, &[2, 6]);
    let g1 = attack::input_gradient(&merged, &x, &y).unwrap();
    let g2 = attack::input_gradient(&PathView { model: &m, path: Path::Clean }, &x, &y).unwrap();
    assert!(max_dev(&g1, &g2) < 1e-9);
}
