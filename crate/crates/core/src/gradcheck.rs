//! Central finite differences, the oracle for every analytic gradient.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams, Objective, Trainable};
use crate::norm::{NormKind, NormSpec};
use crate::rng::{self, stream_rng, SimRng};
use crate::tape::{StatAxes, Tape, Var};
use crate::tensor::Tensor;

/// Finite-difference step used by the suites.
pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error in the suites.
pub const REL_FLOOR: f64 = 1e-6;

/// Estimates `∇f(x)` coordinate by coordinate as `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(alloc::format!("finite-difference step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}

/// Relative error `|a − b| / max(|a|, |b|, floor)` maximized over elements.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> Result<f64> {
    analytic.expect_shape("max_relative_error", numeric.shape())?;
    Ok(analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, b)| (a - b).abs() / a.abs().max(b.abs()).max(floor))
        .fold(0.0, f64::max))
}

/// Worst relative error between analytic and numeric gradients of one
/// operation (or model) input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
}

fn random(rng: &mut SimRng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng::normal(rng)).collect())
}

/// Values bounded away from zero, so finite differences never straddle a ReLU kink.
fn away_from_zero(rng: &mut SimRng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape);
    t.data_mut().iter_mut().for_each(|v| *v = v.signum() * (0.05 + v.abs()));
    t
}

/// Reduces any node to a scalar with fixed, non-uniform weights.
fn weighted_sum(tape: &mut Tape, y: Var) -> Result<Var> {
    let shape = tape.value(y).shape().to_vec();
    let n = tape.value(y).numel();
    let w = Tensor::from_parts(shape, (0..n).map(|i| libm::sin(1.7 * i as f64 + 0.3)).collect());
    let wv = tape.constant(w);
    let prod = tape.mul(y, wv)?;
    tape.sum(prod)
}

fn check_op<F>(name: &str, inputs: &[Tensor], build: F, out: &mut Vec<GradReport>) -> Result<()>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = build(&mut tape, &vars)?;
        let loss = weighted_sum(&mut tape, y)?;
        tape.value(loss).item()
    };
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let y = build(&mut tape, &vars)?;
    let loss = weighted_sum(&mut tape, y)?;
    tape.backward(loss)?;
    for (i, &v) in vars.iter().enumerate() {
        let analytic = tape.grad(v);
        let mut probe: Vec<Tensor> = inputs.to_vec();
        let numeric = finite_diff_grad(
            |x| {
                probe[i] = x.clone();
                eval(&probe)
            },
            &inputs[i],
            STEP,
        )?;
        out.push(GradReport {
            name: alloc::format!("{name}[{i}]"),
            max_rel_err: max_relative_error(&analytic, &numeric, REL_FLOOR)?,
        });
    }
    Ok(())
}

/// Checks every differentiable tape operation on inputs drawn from `seed`.
pub fn op_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut rng = stream_rng(seed, &[0x6772_6164]);
    let r = &mut rng;
    let mut out = Vec::new();
    check_op("matmul", &[random(r, &[3, 4]), random(r, &[4, 2])], |t, v| t.matmul(v[0], v[1]), &mut out)?;
    check_op(
        "conv2d/s1p1",
        &[random(r, &[2, 2, 5, 5]), random(r, &[3, 2, 3, 3]), random(r, &[3])],
        |t, v| t.conv2d(v[0], v[1], Some(v[2]), 1, 1),
        &mut out,
    )?;
    check_op(
        "conv2d/s2p0",
        &[random(r, &[1, 2, 6, 6]), random(r, &[2, 2, 2, 2])],
        |t, v| t.conv2d(v[0], v[1], None, 2, 0),
        &mut out,
    )?;
    check_op(
        "channel_affine",
        &[random(r, &[2, 3, 2, 2]), random(r, &[3]), random(r, &[3])],
        |t, v| t.channel_affine(v[0], Some(v[1]), Some(v[2])),
        &mut out,
    )?;
    check_op("channel_affine/scale", &[random(r, &[4, 3]), random(r, &[3])], |t, v| t.channel_affine(v[0], Some(v[1]), None), &mut out)?;
    for (name, axes) in [
        ("standardize/channel", StatAxes::Channel),
        ("standardize/sample", StatAxes::Sample),
        ("standardize/sample_channel", StatAxes::SampleChannel),
        ("standardize/group", StatAxes::SampleGroup { groups: 2 }),
    ] {
        check_op(name, &[random(r, &[3, 4, 2, 2])], |t, v| Ok(t.standardize(v[0], axes, 1e-5)?.0), &mut out)?;
    }
    check_op("relu", &[away_from_zero(r, &[3, 4])], |t, v| t.relu(v[0]), &mut out)?;
    check_op("add", &[random(r, &[2, 3]), random(r, &[2, 3])], |t, v| t.add(v[0], v[1]), &mut out)?;
    check_op("sub", &[random(r, &[2, 3]), random(r, &[2, 3])], |t, v| t.sub(v[0], v[1]), &mut out)?;
    check_op("mul", &[random(r, &[2, 3]), random(r, &[2, 3])], |t, v| t.mul(v[0], v[1]), &mut out)?;
    check_op("scale", &[random(r, &[2, 3])], |t, v| t.scale(v[0], -1.7), &mut out)?;
    check_op("square", &[random(r, &[2, 3])], |t, v| t.square(v[0]), &mut out)?;
    check_op("sum", &[random(r, &[2, 3])], |t, v| t.sum(v[0]), &mut out)?;
    check_op("mean", &[random(r, &[2, 3])], |t, v| t.mean(v[0]), &mut out)?;
    check_op("mse", &[random(r, &[2, 6]), random(r, &[2, 6])], |t, v| t.mse(v[0], v[1]), &mut out)?;
    check_op(
        "mean_of",
        &[random(r, &[2, 2]), random(r, &[2, 2]), random(r, &[2, 2])],
        |t, v| t.mean_of(&[v[0], v[1], v[2]]),
        &mut out,
    )?;
    check_op("reshape", &[random(r, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4]), &mut out)?;
    check_op("moment_pool", &[random(r, &[2, 2, 3, 4])], |t, v| t.moment_pool(v[0]), &mut out)?;
    Ok(out)
}

/// Two-block toy architecture used by the model-level gradient checks.
pub fn toy_config() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: vec![4, 8],
        norm: NormSpec { clean: NormKind::Bn, adversarial: NormKind::Rna, rna_pool: vec![NormKind::Bn, NormKind::Gn], gn_groups: 2, ..NormSpec::default() },
        head_init_std: 0.3,
        ..ModelConfig::default()
    }
}

/// Gradients of the full local loss (both task terms and the alignment
/// term) on the toy model, for every trainable array, with SSF trainable and
/// with the backbone trainable instead.
pub fn toy_model_suite(seed: u64) -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    for trainable in [Trainable { ssf: true, dual: true }, Trainable { ssf: false, dual: true }] {
        let mut init = stream_rng(seed, &[0x746f_79, trainable.ssf as u64]);
        let mut model = ModelParams::init(toy_config(), trainable, &mut init)?;
        // Perturb SSF away from identity so every term carries signal.
        for p in &mut model.phi.points {
            for t in [&mut p.gamma_cl, &mut p.beta_cl, &mut p.gamma_adv, &mut p.beta_adv] {
                t.data_mut().iter_mut().for_each(|v| *v += 0.3 * rng::normal(&mut init));
            }
        }
        let x = Tensor::from_parts(vec![3, 3, 8, 8], (0..3 * 3 * 64).map(|_| rng::uniform(&mut init)).collect());
        let xa = Tensor::from_parts(x.shape().to_vec(), x.data().iter().map(|v| v + 0.05 * rng::normal(&mut init)).collect());
        let y = Tensor::from_parts(vec![3, 6], (0..18).map(|_| rng::uniform(&mut init)).collect());
        let objective = Objective { adversarial: true, lambda_afl: 0.1 };
        let fwd_seed = seed ^ 0x5eed;
        let loss_at = |m: &ModelParams| -> Result<f64> {
            let mut m = m.clone();
            let mut tape = Tape::new();
            let vars = m.bind(&mut tape, false);
            let (loss, _) = m.local_loss_tape(&mut tape, &vars, &x, Some(&xa), &y, objective, &mut stream_rng(fwd_seed, &[]))?;
            tape.value(loss).item()
        };
        let mut m = model.clone();
        let (_, grads) = m.loss_and_grads(&x, Some(&xa), &y, objective, &mut stream_rng(fwd_seed, &[]))?;
        let names = model.trainable_names();
        for (k, (name, analytic)) in names.iter().zip(&grads).enumerate() {
            let base = model.trainable_arrays()[k].1.clone();
            let numeric = finite_diff_grad(
                |t| {
                    let mut probe = model.clone();
                    *probe.trainable_tensors_mut().swap_remove(k) = t.clone();
                    loss_at(&probe)
                },
                &base,
                STEP,
            )?;
            let tag = if trainable.ssf { "ssf" } else { "full" };
            out.push(GradReport { name: alloc::format!("local_loss/{tag}/{name}"), max_rel_err: max_relative_error(analytic, &numeric, REL_FLOOR)? });
        }
    }
    Ok(out)
}
