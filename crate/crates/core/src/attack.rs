//! Gradient-sign attacks under an L∞ budget: FGSM, PGD and BIM.
//!
//! Attacks differentiate the task loss (mean squared error against the
//! labels) with respect to the input through an eval-mode forward pass, so
//! generating adversarial batches never touches normalization statistics.

use alloc::format;
use alloc::vec::Vec;
use core::str::FromStr;

use crate::error::{Error, Result};
use crate::rng::{self, SimRng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Anything an attacker can differentiate through.
pub trait AttackTarget {
    /// Appends an eval-mode forward pass for `x` to `tape` and returns the predictions.
    fn predict_on(&self, tape: &mut Tape, x: Var) -> Result<Var>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum AttackKind {
    None,
    Fgsm,
    Pgd,
    Bim,
}

impl AttackKind {
    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::None => "none",
            AttackKind::Fgsm => "fgsm",
            AttackKind::Pgd => "pgd",
            AttackKind::Bim => "bim",
        }
    }
}

impl FromStr for AttackKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "none" => Ok(AttackKind::None),
            "fgsm" => Ok(AttackKind::Fgsm),
            "pgd" => Ok(AttackKind::Pgd),
            "bim" => Ok(AttackKind::Bim),
            other => Err(Error::Config(format!("unknown attack {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L∞ budget in input units.
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub random_start: bool,
    pub clamp: (f64, f64),
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            iterations: 10,
            random_start: true,
            clamp: (0.0, 1.0),
        }
    }
}

impl AttackConfig {
    pub fn with_kind(self, kind: AttackKind) -> Self {
        Self { kind, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config(format!("epsilon must be a finite non-negative number, got {}", self.epsilon)));
        }
        if !(self.clamp.0 < self.clamp.1) {
            return Err(Error::Config(format!("clamp range {:?} is empty", self.clamp)));
        }
        if matches!(self.kind, AttackKind::Pgd | AttackKind::Bim) {
            if self.iterations == 0 {
                return Err(Error::Config("iterative attacks need at least one iteration".into()));
            }
            if !(self.step_size > 0.0) {
                return Err(Error::Config(format!("step size must be positive, got {}", self.step_size)));
            }
            if self.iterations > 1 && self.epsilon > 0.0 && self.step_size > self.epsilon {
                return Err(Error::Config(format!(
                    "step size {} exceeds epsilon {}",
                    self.step_size, self.epsilon
                )));
            }
        }
        Ok(())
    }
}

/// `∇ₓ mse(f(x), y)`.
pub fn input_gradient(target: &dyn AttackTarget, x: &Tensor, y: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let pred = target.predict_on(&mut tape, xv)?;
    let yv = tape.constant(y.clone());
    let loss = tape.mse(pred, yv)?;
    tape.backward(loss)?;
    Ok(tape.grad(xv))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn clamp(v: f64, range: (f64, f64)) -> f64 {
    v.max(range.0).min(range.1)
}

/// `clamp(x + ε·sign(∇ₓ loss))`.
pub fn fgsm(target: &dyn AttackTarget, x: &Tensor, y: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    cfg.validate()?;
    if cfg.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let g = input_gradient(target, x, y)?;
    let data = x.data().iter().zip(g.data()).map(|(&xi, &gi)| clamp(xi + cfg.epsilon * sign(gi), cfg.clamp)).collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Projected gradient descent; `observe` sees every iterate (including the start point).
pub fn pgd_observed(
    target: &dyn AttackTarget,
    x: &Tensor,
    y: &Tensor,
    cfg: &AttackConfig,
    rng: &mut SimRng,
    observe: &mut dyn FnMut(&Tensor),
) -> Result<Tensor> {
    cfg.validate()?;
    let eps = cfg.epsilon;
    let project = |v: f64, xi: f64| v.max(xi - eps).min(xi + eps);
    let mut a: Vec<f64> = if cfg.random_start {
        x.data()
            .iter()
            .map(|&xi| project(clamp(xi + eps * (2.0 * rng::uniform(rng) - 1.0), cfg.clamp), xi))
            .collect()
    } else {
        x.data().to_vec()
    };
    observe(&Tensor::new(x.shape().to_vec(), a.clone())?);
    for _ in 0..cfg.iterations {
        let current = Tensor::new(x.shape().to_vec(), a)?;
        let g = input_gradient(target, &current, y)?;
        a = current
            .data()
            .iter()
            .zip(g.data())
            .zip(x.data())
            .map(|((&ai, &gi), &xi)| project(clamp(ai + cfg.step_size * sign(gi), cfg.clamp), xi))
            .collect();
        observe(&Tensor::new(x.shape().to_vec(), a.clone())?);
    }
    Tensor::new(x.shape().to_vec(), a)
}

pub fn pgd(target: &dyn AttackTarget, x: &Tensor, y: &Tensor, cfg: &AttackConfig, rng: &mut SimRng) -> Result<Tensor> {
    pgd_observed(target, x, y, cfg, rng, &mut |_| {})
}

/// PGD without a random start.
pub fn bim(target: &dyn AttackTarget, x: &Tensor, y: &Tensor, cfg: &AttackConfig, rng: &mut SimRng) -> Result<Tensor> {
    let cfg = AttackConfig { random_start: false, ..*cfg };
    pgd(target, x, y, &cfg, rng)
}

/// Dispatches on `cfg.kind`; `None` returns the input unchanged.
pub fn generate(target: &dyn AttackTarget, x: &Tensor, y: &Tensor, cfg: &AttackConfig, rng: &mut SimRng) -> Result<Tensor> {
    match cfg.kind {
        AttackKind::None => Ok(x.clone()),
        AttackKind::Fgsm => fgsm(target, x, y, cfg),
        AttackKind::Pgd => pgd(target, x, y, cfg, rng),
        AttackKind::Bim => bim(target, x, y, cfg, rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    /// `pred = w·x` on a `1×1` input.
    struct Linear(f64);

    impl AttackTarget for Linear {
        fn predict_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
            let w = tape.constant(Tensor::scalar(self.0));
            tape.channel_affine(x, Some(w), None)
        }
    }

    fn input(v: f64) -> (Tensor, Tensor) {
        (Tensor::new(alloc::vec![1, 1], alloc::vec![v]).unwrap(), Tensor::new(alloc::vec![1, 1], alloc::vec![0.0]).unwrap())
    }

    #[test]
    fn fgsm_follows_gradient_sign() {
        let (x, y) = input(0.5);
        let cfg = AttackConfig { epsilon: 0.1, ..AttackConfig::default() };
        let g = input_gradient(&Linear(1.0), &x, &y).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-15);
        let a = fgsm(&Linear(1.0), &x, &y, &cfg).unwrap();
        assert!((a.data()[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn zero_budget_is_identity() {
        let (x, y) = input(0.3);
        let cfg = AttackConfig { epsilon: 0.0, ..AttackConfig::default() };
        assert!(fgsm(&Linear(2.0), &x, &y, &cfg).unwrap().bitwise_eq(&x));
        let pgd_cfg = AttackConfig { kind: AttackKind::Pgd, random_start: true, ..cfg };
        assert!(pgd(&Linear(2.0), &x, &y, &pgd_cfg, &mut stream_rng(1, &[])).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn zero_gradient_leaves_input() {
        let (x, y) = input(0.0);
        let cfg = AttackConfig { epsilon: 0.1, ..AttackConfig::default() };
        assert!(fgsm(&Linear(1.0), &x, &y, &cfg).unwrap().bitwise_eq(&x));
    }

    #[test]
    fn clamps_to_range() {
        let (x, y) = input(0.98);
        let cfg = AttackConfig { epsilon: 0.1, ..AttackConfig::default() };
        assert_eq!(fgsm(&Linear(1.0), &x, &y, &cfg).unwrap().data()[0], 1.0);
    }

    #[test]
    fn config_validation() {
        let bad_step = AttackConfig { kind: AttackKind::Pgd, step_size: 0.0, ..AttackConfig::default() };
        assert!(matches!(bad_step.validate(), Err(Error::Config(_))));
        let big_step = AttackConfig { kind: AttackKind::Bim, step_size: 0.5, epsilon: 0.1, ..AttackConfig::default() };
        assert!(big_step.validate().is_err());
        let no_iter = AttackConfig { kind: AttackKind::Pgd, iterations: 0, ..AttackConfig::default() };
        assert!(no_iter.validate().is_err());
        assert!(AttackConfig { epsilon: -1.0, ..AttackConfig::default() }.validate().is_err());
        assert_eq!("PGD".parse::<AttackKind>().unwrap(), AttackKind::Pgd);
    }
}
