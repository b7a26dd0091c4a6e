//! Normalization layers and the clean/adversarial dual-path pair.
//!
//! Layers carry no learnable affine; all affine capacity lives in the SSF
//! parameters that follow them. Random normalization aggregation (RNA) draws
//! one pool member uniformly per training forward pass and averages the
//! outputs of all members at evaluation.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use crate::error::{dim_err, Error, Result};
use crate::rng::{self, SimRng};
use crate::tape::{StatAxes, Tape, Var};
use crate::tensor::Tensor;

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_GN_GROUPS: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum NormKind {
    Bn,
    Ln,
    In,
    Gn,
    Rna,
}

impl NormKind {
    pub const ALL: [NormKind; 5] = [NormKind::Bn, NormKind::Ln, NormKind::In, NormKind::Gn, NormKind::Rna];

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Bn => "bn",
            NormKind::Ln => "ln",
            NormKind::In => "in",
            NormKind::Gn => "gn",
            NormKind::Rna => "rna",
        }
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for NormKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bn" => Ok(NormKind::Bn),
            "ln" => Ok(NormKind::Ln),
            "in" => Ok(NormKind::In),
            "gn" => Ok(NormKind::Gn),
            "rna" => Ok(NormKind::Rna),
            other => Err(Error::Config(format!("unknown normalization kind {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Train,
    Eval,
}

/// Declarative choice of normalization for both paths.
#[derive(Debug, Clone, PartialEq)]
pub struct NormSpec {
    pub clean: NormKind,
    pub adversarial: NormKind,
    pub rna_pool: Vec<NormKind>,
    pub gn_groups: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl Default for NormSpec {
    fn default() -> Self {
        Self {
            clean: NormKind::Bn,
            adversarial: NormKind::Rna,
            rna_pool: vec![NormKind::Bn, NormKind::Gn],
            gn_groups: DEFAULT_GN_GROUPS,
            eps: DEFAULT_EPS,
            momentum: DEFAULT_MOMENTUM,
        }
    }
}

impl NormSpec {
    pub fn build(&self, kind: NormKind, channels: usize) -> Result<NormLayer> {
        let mut layer = NormLayer::new(kind, channels, self.gn_groups, self.eps, self.momentum, &self.rna_pool)?;
        layer.set_mode(NormMode::Train);
        Ok(layer)
    }

    pub fn build_pair(&self, channels: usize) -> Result<DualNormPair> {
        Ok(DualNormPair { clean: self.build(self.clean, channels)?, adversarial: self.build(self.adversarial, channels)? })
    }
}

/// Running mean and biased variance of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub initialized: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormLayer {
    kind: NormKind,
    channels: usize,
    groups: usize,
    eps: f64,
    momentum: f64,
    running: Option<RunningStats>,
    pool: Vec<NormLayer>,
    mode: NormMode,
}

impl NormLayer {
    pub fn new(kind: NormKind, channels: usize, groups: usize, eps: f64, momentum: f64, rna_pool: &[NormKind]) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("normalization needs at least one channel".into()));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("epsilon must be positive, got {eps}")));
        }
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::Config(format!("momentum must lie in (0, 1), got {momentum}")));
        }
        if kind == NormKind::Gn && (groups == 0 || !channels.is_multiple_of(groups)) {
            return Err(Error::Config(format!("{channels} channels are not divisible into {groups} groups")));
        }
        let pool = if kind == NormKind::Rna {
            if rna_pool.is_empty() {
                return Err(Error::Config("RNA pool must not be empty".into()));
            }
            if rna_pool.contains(&NormKind::Rna) {
                return Err(Error::Config("RNA pool cannot contain RNA".into()));
            }
            rna_pool
                .iter()
                .map(|&k| NormLayer::new(k, channels, groups, eps, momentum, &[]))
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let running = (kind == NormKind::Bn).then(|| RunningStats {
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            initialized: false,
        });
        Ok(Self { kind, channels, groups, eps, momentum, running, pool, mode: NormMode::Train })
    }

    pub fn kind(&self) -> NormKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn mode(&self) -> NormMode {
        self.mode
    }

    pub fn pool(&self) -> &[NormLayer] {
        &self.pool
    }

    pub fn running(&self) -> Option<&RunningStats> {
        self.running.as_ref()
    }

    pub fn set_mode(&mut self, mode: NormMode) {
        self.mode = mode;
        for m in &mut self.pool {
            m.set_mode(mode);
        }
    }

    /// Overwrites batch-norm buffers, e.g. when restoring a checkpoint.
    pub fn set_running(&mut self, stats: RunningStats) -> Result<()> {
        if self.kind != NormKind::Bn {
            return Err(Error::Contract(format!("{} layers have no running statistics", self.kind)));
        }
        if stats.mean.len() != self.channels || stats.var.len() != self.channels {
            return Err(dim_err("set_running", format!("{} channels", self.channels)));
        }
        if stats.var.iter().any(|&v| v < 0.0) {
            return Err(Error::Contract("running variance must be non-negative".into()));
        }
        self.running = Some(stats);
        Ok(())
    }

    pub fn pool_mut(&mut self) -> &mut [NormLayer] {
        &mut self.pool
    }

    fn axes(&self) -> StatAxes {
        match self.kind {
            NormKind::Bn => StatAxes::Channel,
            NormKind::Ln => StatAxes::Sample,
            NormKind::In => StatAxes::SampleChannel,
            NormKind::Gn => StatAxes::SampleGroup { groups: self.groups },
            NormKind::Rna => unreachable!("RNA delegates to its pool"),
        }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let shape = tape.value(x).shape();
        if shape.len() < 2 || shape[1] != self.channels {
            return Err(dim_err("normalize", format!("expected {} channels, input {shape:?}", self.channels)));
        }
        Ok(())
    }

    /// Applies the layer in its current mode. Train-mode batch norm updates
    /// the running buffers; train-mode RNA consumes one draw from `rng`.
    pub fn normalize(&mut self, tape: &mut Tape, x: Var, rng: &mut SimRng) -> Result<Var> {
        if self.mode == NormMode::Eval {
            return self.normalize_eval(tape, x);
        }
        self.check_input(tape, x)?;
        match self.kind {
            NormKind::Rna => {
                let pick = rng::index(rng, self.pool.len());
                self.pool[pick].normalize(tape, x, rng)
            }
            NormKind::Bn => {
                let (y, stats) = tape.standardize(x, StatAxes::Channel, self.eps)?;
                self.update_running_stats(&stats.mean, &stats.var)?;
                Ok(y)
            }
            _ => Ok(tape.standardize(x, self.axes(), self.eps)?.0),
        }
    }

    /// Eval-mode application; never mutates the layer.
    pub fn normalize_eval(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        match self.kind {
            NormKind::Rna => {
                let outs = self.pool.iter().map(|m| m.normalize_eval(tape, x)).collect::<Result<Vec<_>>>()?;
                tape.mean_of(&outs)
            }
            NormKind::Bn => {
                let (scale, shift) = self.folded_affine(None, None)?;
                let s = tape.constant(Tensor::from_parts(vec![self.channels], scale));
                let b = tape.constant(Tensor::from_parts(vec![self.channels], shift));
                tape.channel_affine(x, Some(s), Some(b))
            }
            _ => Ok(tape.standardize(x, self.axes(), self.eps)?.0),
        }
    }

    /// Recomputes batch-norm buffers exactly from one batch (no momentum) and
    /// returns the eval-style output. RNA calibrates every pool member.
    pub fn calibrate(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        self.check_input(tape, x)?;
        match self.kind {
            NormKind::Rna => {
                let outs = self.pool.iter_mut().map(|m| m.calibrate(tape, x)).collect::<Result<Vec<_>>>()?;
                tape.mean_of(&outs)
            }
            NormKind::Bn => {
                let (y, stats) = tape.standardize(x, StatAxes::Channel, self.eps)?;
                self.running = Some(RunningStats { mean: stats.mean, var: stats.var, initialized: true });
                Ok(y)
            }
            _ => Ok(tape.standardize(x, self.axes(), self.eps)?.0),
        }
    }

    /// `running ← running + momentum·(batch − running)`, per channel.
    pub fn update_running_stats(&mut self, batch_mean: &[f64], batch_var: &[f64]) -> Result<()> {
        if self.mode != NormMode::Train {
            return Err(Error::Contract("running statistics can only be updated in train mode".into()));
        }
        let m = self.momentum;
        let channels = self.channels;
        let stats = self
            .running
            .as_mut()
            .ok_or_else(|| Error::Contract(format!("{} layers keep no running statistics", self.kind)))?;
        if batch_mean.len() != channels || batch_var.len() != channels {
            return Err(dim_err("update_running_stats", format!("{channels} channels")));
        }
        for (r, &b) in stats.mean.iter_mut().zip(batch_mean) {
            *r += m * (b - *r);
        }
        for (r, &b) in stats.var.iter_mut().zip(batch_var) {
            *r += m * (b - *r);
        }
        stats.initialized = true;
        Ok(())
    }

    /// Per-channel `(a, c)` such that `γ·BN_eval(x) + β = a·x + c` for a batch-norm layer.
    /// `None` stands for the identity `γ = 1`, `β = 0`.
    pub fn folded_affine(&self, gamma: Option<&[f64]>, beta: Option<&[f64]>) -> Result<(Vec<f64>, Vec<f64>)> {
        let stats = match &self.running {
            Some(s) if s.initialized => s,
            Some(_) => return Err(Error::UninitializedStatistics),
            None => return Err(Error::Contract(format!("{} layers have no frozen statistics", self.kind))),
        };
        let mut scale = Vec::with_capacity(self.channels);
        let mut shift = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let inv = 1.0 / libm::sqrt(stats.var[c] + self.eps);
            let a = gamma.map_or(1.0, |g| g[c]) * inv;
            scale.push(a);
            shift.push(beta.map_or(0.0, |b| b[c]) - stats.mean[c] * a);
        }
        Ok((scale, shift))
    }

    /// Standalone application to a tensor, outside any larger graph.
    pub fn apply(&mut self, x: &Tensor, rng: &mut SimRng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = self.normalize(&mut tape, v, rng)?;
        Ok(tape.value(y).clone())
    }

    /// Human-readable description, e.g. `rna[bn,gn]`.
    pub fn describe(&self) -> String {
        if self.kind == NormKind::Rna {
            let names: Vec<&str> = self.pool.iter().map(|m| m.kind.as_str()).collect();
            format!("rna[{}]", names.join(","))
        } else {
            self.kind.to_string()
        }
    }
}

/// Separate normalization for the clean and the adversarial stream.
#[derive(Debug, Clone, PartialEq)]
pub struct DualNormPair {
    pub clean: NormLayer,
    pub adversarial: NormLayer,
}

impl DualNormPair {
    pub fn set_mode(&mut self, mode: NormMode) {
        self.clean.set_mode(mode);
        self.adversarial.set_mode(mode);
    }

    /// Routes each stream through its own layer only.
    pub fn dual_forward(&mut self, tape: &mut Tape, clean: Var, adversarial: Var, rng: &mut SimRng) -> Result<(Var, Var)> {
        let (sc, sa) = (tape.value(clean).shape(), tape.value(adversarial).shape());
        if sc != sa {
            return Err(dim_err("dual_forward", format!("clean {sc:?} vs adversarial {sa:?}")));
        }
        let yc = self.clean.normalize(tape, clean, rng)?;
        let ya = self.adversarial.normalize(tape, adversarial, rng)?;
        Ok((yc, ya))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn layer(kind: NormKind, channels: usize) -> NormLayer {
        NormLayer::new(kind, channels, 2, DEFAULT_EPS, DEFAULT_MOMENTUM, &[NormKind::Bn, NormKind::Gn]).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut r = stream_rng(seed, &[]);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| 3.0 * rng::normal(&mut r) + 1.5).collect()).unwrap()
    }

    #[test]
    fn batch_norm_two_values_per_channel() {
        let mut bn = layer(NormKind::Bn, 1);
        let x = Tensor::new(vec![2, 1, 1, 1], vec![1.0, 3.0]).unwrap();
        let y = bn.apply(&x, &mut stream_rng(0, &[])).unwrap();
        let expected = 1.0 / libm::sqrt(1.0 + DEFAULT_EPS);
        assert!((y.data()[0] + expected).abs() < 1e-6);
        assert!((y.data()[1] - expected).abs() < 1e-6);
    }

    #[test]
    fn constant_input_normalizes_to_zero() {
        let x = Tensor::full(&[3, 4, 2, 2], 2.5);
        for kind in NormKind::ALL {
            let mut l = layer(kind, 4);
            let y = l.apply(&x, &mut stream_rng(1, &[])).unwrap();
            assert!(y.data().iter().all(|v| v.abs() < 1e-12), "{kind}");
        }
    }

    #[test]
    fn train_output_is_standardized_over_kind_axes() {
        let x = random(&[4, 4, 3, 3], 9);
        let (n, c, s) = (4usize, 4usize, 9usize);
        for kind in [NormKind::Bn, NormKind::Ln, NormKind::In, NormKind::Gn] {
            let mut l = layer(kind, c);
            let y = l.apply(&x, &mut stream_rng(2, &[])).unwrap();
            let mut buckets: Vec<Vec<f64>> = Vec::new();
            let axes = l.axes();
            buckets.resize(axes.group_count(n, c), Vec::new());
            for ni in 0..n {
                for ch in 0..c {
                    let g = match axes {
                        StatAxes::Channel => ch,
                        StatAxes::Sample => ni,
                        StatAxes::SampleChannel => ni * c + ch,
                        StatAxes::SampleGroup { groups } => ni * groups + ch / (c / groups),
                    };
                    buckets[g].extend_from_slice(&y.data()[(ni * c + ch) * s..(ni * c + ch + 1) * s]);
                }
            }
            for b in buckets {
                let mean = b.iter().sum::<f64>() / b.len() as f64;
                let var = b.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / b.len() as f64;
                assert!(mean.abs() < 1e-6, "{kind} mean {mean}");
                assert!((var - 1.0).abs() < 1e-4, "{kind} var {var}");
            }
        }
    }

    #[test]
    fn eval_batch_norm_requires_statistics() {
        let mut bn = layer(NormKind::Bn, 2);
        bn.set_mode(NormMode::Eval);
        let x = random(&[2, 2, 2, 2], 3);
        assert_eq!(bn.apply(&x, &mut stream_rng(0, &[])), Err(Error::UninitializedStatistics));
    }

    #[test]
    fn running_stat_recurrence() {
        let mut bn = layer(NormKind::Bn, 1);
        bn.update_running_stats(&[1.0], &[1.0]).unwrap();
        assert_eq!(bn.running().unwrap().mean, vec![0.1]);

        let mut bn = NormLayer::new(NormKind::Bn, 1, 1, DEFAULT_EPS, 0.5, &[]).unwrap();
        bn.update_running_stats(&[2.0], &[1.0]).unwrap();
        assert_eq!(bn.running().unwrap().mean, vec![1.0]);
        bn.update_running_stats(&[2.0], &[1.0]).unwrap();
        assert_eq!(bn.running().unwrap().mean, vec![1.5]);

        let before = bn.running().unwrap().clone();
        bn.update_running_stats(&before.mean.clone(), &before.var.clone()).unwrap();
        assert_eq!(bn.running().unwrap().mean, before.mean);
        assert_eq!(bn.running().unwrap().var, before.var);
    }

    #[test]
    fn running_update_rejected_in_eval_mode() {
        let mut bn = layer(NormKind::Bn, 1);
        bn.set_mode(NormMode::Eval);
        assert!(matches!(bn.update_running_stats(&[0.0], &[1.0]), Err(Error::Contract(_))));
    }

    #[test]
    fn rna_with_singleton_pool_is_plain_bn() {
        let x = random(&[3, 2, 2, 2], 4);
        for seed in 0..5 {
            let mut rna = NormLayer::new(NormKind::Rna, 2, 2, DEFAULT_EPS, DEFAULT_MOMENTUM, &[NormKind::Bn]).unwrap();
            let mut bn = layer(NormKind::Bn, 2);
            let a = rna.apply(&x, &mut stream_rng(seed, &[])).unwrap();
            let b = bn.apply(&x, &mut stream_rng(seed, &[])).unwrap();
            assert!(a.bitwise_eq(&b));
            assert_eq!(rna.pool()[0].running(), bn.running());
        }
    }

    #[test]
    fn rna_train_output_is_one_pool_member() {
        let x = random(&[3, 4, 2, 2], 5);
        let members: Vec<Tensor> = [NormKind::Bn, NormKind::Gn]
            .iter()
            .map(|&k| layer(k, 4).apply(&x, &mut stream_rng(0, &[])).unwrap())
            .collect();
        let mut hits = [false; 2];
        for seed in 0..16 {
            let mut rna = layer(NormKind::Rna, 4);
            let y = rna.apply(&x, &mut stream_rng(seed, &[])).unwrap();
            let again = layer(NormKind::Rna, 4).apply(&x, &mut stream_rng(seed, &[])).unwrap();
            assert!(y.bitwise_eq(&again));
            let which = members.iter().position(|m| m.bitwise_eq(&y)).expect("output must match a member");
            hits[which] = true;
        }
        assert_eq!(hits, [true, true]);
    }

    #[test]
    fn rna_eval_averages_members() {
        let x = random(&[3, 4, 2, 2], 6);
        let mut rna = layer(NormKind::Rna, 4);
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        rna.calibrate(&mut tape, v).unwrap();
        rna.set_mode(NormMode::Eval);
        let y = rna.apply(&x, &mut stream_rng(0, &[])).unwrap();
        let outs: Vec<Tensor> = rna.pool().iter().map(|m| {
            let mut t = Tape::new();
            let v = t.constant(x.clone());
            let o = m.normalize_eval(&mut t, v).unwrap();
            t.value(o).clone()
        }).collect();
        for i in 0..x.numel() {
            let mean = (outs[0].data()[i] + outs[1].data()[i]) / 2.0;
            assert!((y.data()[i] - mean).abs() < 1e-15);
        }
    }

    #[test]
    fn config_validation() {
        assert!(NormLayer::new(NormKind::Gn, 6, 4, DEFAULT_EPS, 0.1, &[]).is_err());
        assert!(NormLayer::new(NormKind::Rna, 4, 2, DEFAULT_EPS, 0.1, &[]).is_err());
        assert!(NormLayer::new(NormKind::Rna, 4, 2, DEFAULT_EPS, 0.1, &[NormKind::Rna]).is_err());
        assert!(NormLayer::new(NormKind::Bn, 4, 2, 0.0, 0.1, &[]).is_err());
        assert_eq!("RNA".parse::<NormKind>().unwrap(), NormKind::Rna);
        assert!("bogus".parse::<NormKind>().is_err());
    }

    #[test]
    fn dual_forward_isolates_statistics() {
        let spec = NormSpec { clean: NormKind::Bn, adversarial: NormKind::Bn, ..NormSpec::default() };
        let xc = random(&[4, 2, 3, 3], 7);
        let xa = random(&[4, 2, 3, 3], 8);
        let mut pair = spec.build_pair(2).unwrap();
        let mut solo = spec.build(NormKind::Bn, 2).unwrap();
        let mut rng = stream_rng(0, &[]);
        let mut tape = Tape::new();
        let (c, a) = (tape.constant(xc.clone()), tape.constant(xa.clone()));
        pair.dual_forward(&mut tape, c, a, &mut rng).unwrap();
        solo.apply(&xc, &mut rng).unwrap();
        assert_eq!(pair.clean.running(), solo.running());
        assert_ne!(pair.adversarial.running(), solo.running());

        let bad = tape.constant(Tensor::zeros(&[2, 2, 3, 3]));
        assert!(matches!(pair.dual_forward(&mut tape, c, bad, &mut rng), Err(Error::Dimension { .. })));
    }

    #[test]
    fn dual_forward_symmetric_on_equal_streams() {
        let spec = NormSpec { clean: NormKind::Gn, adversarial: NormKind::Gn, ..NormSpec::default() };
        let x = random(&[2, 4, 2, 2], 11);
        let mut pair = spec.build_pair(4).unwrap();
        let mut tape = Tape::new();
        let (c, a) = (tape.constant(x.clone()), tape.constant(x));
        let (yc, ya) = pair.dual_forward(&mut tape, c, a, &mut stream_rng(0, &[])).unwrap();
        assert!(tape.value(yc).bitwise_eq(tape.value(ya)));
    }
}
