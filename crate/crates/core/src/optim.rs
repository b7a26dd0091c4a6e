//! SGD with momentum and L2 weight decay.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::tensor::{check_finite, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for SgdConfig {
    fn default() -> Self {
        Self { lr: 0.03, momentum: 0.9, weight_decay: 1e-4 }
    }
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config(format!("weight decay must be non-negative, got {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// `v ← μ·v + (g + λ·p)`, `p ← p − η·v`; the first step sets `v = g + λ·p`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub config: SgdConfig,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(config: SgdConfig) -> Self {
        Self { config, velocity: Vec::new() }
    }

    /// Forgets accumulated momentum.
    pub fn reset(&mut self) {
        self.velocity.clear();
    }

    pub fn step(&mut self, params: Vec<&mut Tensor>, grads: &[Tensor]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!("{} parameters but {} gradients", params.len(), grads.len())));
        }
        let fresh = self.velocity.is_empty();
        if !fresh && self.velocity.len() != params.len() {
            return Err(Error::Contract("parameter list changed between optimizer steps".into()));
        }
        let SgdConfig { lr, momentum, weight_decay } = self.config;
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            p.expect_shape("sgd step", g.shape())?;
            if fresh {
                self.velocity.push(alloc::vec![0.0; p.numel()]);
            }
            let v = &mut self.velocity[i];
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
                let d = gv + weight_decay * *pv;
                *vv = if fresh { d } else { momentum * *vv + d };
                *pv -= lr * *vv;
            }
            check_finite("sgd step", p.data())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plain_gradient_step() {
        let mut p = Tensor::scalar(1.5);
        let g = Tensor::scalar(0.4);
        let mut sgd = Sgd::new(SgdConfig { lr: 0.1, momentum: 0.0, weight_decay: 0.0 });
        sgd.step(alloc::vec![&mut p], &[g]).unwrap();
        assert_eq!(p.data()[0], 1.5 - 0.1 * 0.4);
    }

    #[test]
    fn momentum_accumulates() {
        let mut p = Tensor::scalar(0.0);
        let g = Tensor::scalar(1.0);
        let mut sgd = Sgd::new(SgdConfig { lr: 1.0, momentum: 0.5, weight_decay: 0.0 });
        sgd.step(alloc::vec![&mut p], std::slice::from_ref(&g)).unwrap();
        sgd.step(alloc::vec![&mut p], &[g]).unwrap();
        assert_eq!(p.data()[0], -1.0 - 1.5);
    }

    #[test]
    fn weight_decay_shrinks() {
        let mut p = Tensor::scalar(2.0);
        let mut sgd = Sgd::new(SgdConfig { lr: 0.5, momentum: 0.0, weight_decay: 0.1 });
        sgd.step(alloc::vec![&mut p], &[Tensor::scalar(0.0)]).unwrap();
        assert_eq!(p.data()[0], 2.0 - 0.5 * 0.2);
    }
}
