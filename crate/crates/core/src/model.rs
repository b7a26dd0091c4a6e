//! The local model: a frozen convolutional backbone, SSF insertion points
//! with separate clean and adversarial parameter copies, a shared regression
//! head, and the merge that folds SSF back into the backbone for inference.
//!
//! Each block is `conv → normalization → SSF → ReLU`; the last block feeds a
//! moment pool (per-channel spatial mean plus coordinate-weighted means) and
//! a linear head with one output per pose component.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::attack::AttackTarget;
use crate::error::{dim_err, Error, Result};
use crate::norm::{DualNormPair, NormKind, NormLayer, NormMode, NormSpec, RunningStats};
use crate::rng::{self, SimRng};
use crate::tape::{StatAxes, Tape, Var};
use crate::tensor::Tensor;

/// Number of pose outputs per sample.
pub const POSE_OUTPUTS: usize = 6;

/// Which parameter copy and which normalization of each pair a forward pass uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Path {
    Clean,
    Adversarial,
}

/// Which SSF copy is folded into the inference model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum MergePolicy {
    #[default]
    Clean,
    Adversarial,
    /// Clean-path normalization with the mean of both SSF copies.
    Average,
}

impl core::str::FromStr for MergePolicy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clean" => Ok(MergePolicy::Clean),
            "adversarial" | "adv" => Ok(MergePolicy::Adversarial),
            "average" | "avg" => Ok(MergePolicy::Average),
            other => Err(Error::Config(format!("unknown merge policy {other:?}"))),
        }
    }
}

impl MergePolicy {
    pub fn as_str(self) -> &'static str {
        match self {
            MergePolicy::Clean => "clean",
            MergePolicy::Adversarial => "adversarial",
            MergePolicy::Average => "average",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub outputs: usize,
    pub norm: NormSpec,
    /// Standard deviation of the freshly initialized head weights.
    pub head_init_std: f64,
    /// Initial value of every head bias (labels live in `[0, 1]`).
    pub head_init_bias: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            image_size: 32,
            channels: vec![8, 16, 32],
            kernel_size: 3,
            stride: 2,
            padding: 1,
            outputs: POSE_OUTPUTS,
            norm: NormSpec::default(),
            head_init_std: 0.01,
            head_init_bias: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels.is_empty() {
            return Err(Error::Config("model needs at least one block".into()));
        }
        if self.in_channels == 0 || self.outputs == 0 || self.kernel_size == 0 || self.stride == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        let mut size = self.image_size;
        for _ in &self.channels {
            if self.kernel_size > size + 2 * self.padding {
                return Err(Error::Config(format!("image size {} too small for {} blocks", self.image_size, self.channels.len())));
            }
            size = (size + 2 * self.padding - self.kernel_size) / self.stride + 1;
        }
        for &c in &self.channels {
            self.norm.build_pair(c)?;
        }
        Ok(())
    }

    /// Width of the pooled feature vector feeding the head.
    pub fn feature_len(&self) -> usize {
        3 * self.channels.last().copied().unwrap_or(0)
    }
}

/// Frozen convolution weights of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

/// Convolution weights `θ` and the normalization pair of every block.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub convs: Vec<ConvParams>,
    pub norms: Vec<DualNormPair>,
}

impl Backbone {
    /// He-normal kernels and zero biases.
    pub fn init(config: &ModelConfig, rng: &mut SimRng) -> Result<Self> {
        config.validate()?;
        let mut convs = Vec::new();
        let mut norms = Vec::new();
        let mut cin = config.in_channels;
        let k = config.kernel_size;
        for &cout in &config.channels {
            let fan_in = (cin * k * k) as f64;
            let std = libm::sqrt(2.0 / fan_in);
            let data = (0..cout * cin * k * k).map(|_| std * rng::normal(rng)).collect();
            convs.push(ConvParams {
                kernel: Tensor::new(vec![cout, cin, k, k], data)?,
                bias: Tensor::zeros(&[cout]),
            });
            norms.push(config.norm.build_pair(cout)?);
            cin = cout;
        }
        Ok(Self { convs, norms })
    }

    pub fn theta_count(&self) -> usize {
        self.convs.iter().map(|c| c.kernel.numel() + c.bias.numel()).sum()
    }

    pub fn theta_arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (d, c) in self.convs.iter().enumerate() {
            out.push((format!("theta/{d}/kernel"), &c.kernel));
            out.push((format!("theta/{d}/bias"), &c.bias));
        }
        out
    }

    /// Little-endian bytes of every `θ` array in order; the frozen-backbone witness.
    pub fn theta_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for (_, t) in self.theta_arrays() {
            out.extend(t.to_le_bytes());
        }
        out
    }

    /// Copies per-block batch-norm statistics into every batch-norm layer
    /// (both paths and RNA pool members).
    pub fn seed_bn_statistics(&mut self, stats: &[RunningStats]) -> Result<()> {
        if stats.len() != self.norms.len() {
            return Err(dim_err("seed_bn_statistics", format!("{} blocks, {} stat sets", self.norms.len(), stats.len())));
        }
        fn seed(layer: &mut NormLayer, s: &RunningStats) -> Result<()> {
            match layer.kind() {
                NormKind::Bn => layer.set_running(s.clone()),
                NormKind::Rna => layer.pool_mut().iter_mut().try_for_each(|m| seed(m, s)),
                _ => Ok(()),
            }
        }
        for (pair, s) in self.norms.iter_mut().zip(stats) {
            seed(&mut pair.clean, s)?;
            seed(&mut pair.adversarial, s)?;
        }
        Ok(())
    }
}

/// Scale and shift for one insertion point, on both paths.
#[derive(Debug, Clone, PartialEq)]
pub struct SsfPoint {
    pub gamma_cl: Tensor,
    pub beta_cl: Tensor,
    pub gamma_adv: Tensor,
    pub beta_adv: Tensor,
}

impl SsfPoint {
    pub fn identity(channels: usize) -> Self {
        Self {
            gamma_cl: Tensor::ones(&[channels]),
            beta_cl: Tensor::zeros(&[channels]),
            gamma_adv: Tensor::ones(&[channels]),
            beta_adv: Tensor::zeros(&[channels]),
        }
    }

    pub fn select(&self, path: Path) -> (&Tensor, &Tensor) {
        match path {
            Path::Clean => (&self.gamma_cl, &self.beta_cl),
            Path::Adversarial => (&self.gamma_adv, &self.beta_adv),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    /// `features × outputs`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Head {
    pub fn init(features: usize, outputs: usize, std: f64, bias: f64, rng: &mut SimRng) -> Result<Self> {
        let data = (0..features * outputs).map(|_| std * rng::normal(rng)).collect();
        Ok(Self { weight: Tensor::new(vec![features, outputs], data)?, bias: Tensor::full(&[outputs], bias) })
    }
}

/// Trainable parameters `φ = {γ_cl, β_cl, γ_adv, β_adv, h}`.
#[derive(Debug, Clone, PartialEq)]
pub struct SsfParams {
    pub points: Vec<SsfPoint>,
    pub head: Head,
}

impl SsfParams {
    /// SSF at identity (`γ = 1`, `β = 0`) with a freshly drawn head.
    pub fn init(config: &ModelConfig, rng: &mut SimRng) -> Result<Self> {
        Ok(Self {
            points: config.channels.iter().map(|&c| SsfPoint::identity(c)).collect(),
            head: Head::init(config.feature_len(), config.outputs, config.head_init_std, config.head_init_bias, rng)?,
        })
    }
}

/// Which arrays the optimizer may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Trainable {
    /// SSF fine-tuning with a frozen backbone; when false the full backbone
    /// is trained and no SSF transform is applied.
    pub ssf: bool,
    /// Both clean and adversarial paths are trained.
    pub dual: bool,
}

impl Default for Trainable {
    fn default() -> Self {
        Self { ssf: true, dual: true }
    }
}

/// Frozen backbone plus attached trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub phi: SsfParams,
    pub trainable: Trainable,
}

/// Tape handles for every array of a [`ModelParams`].
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub theta: Vec<(Var, Var)>,
    pub ssf_cl: Vec<(Var, Var)>,
    pub ssf_adv: Vec<(Var, Var)>,
    pub head: (Var, Var),
    /// Same order as [`ModelParams::trainable_names`].
    pub trainable: Vec<Var>,
    apply_ssf: bool,
}

/// Intermediate nodes of one forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub prediction: Var,
    /// Normalized features before SSF, one per block.
    pub pre_ssf: Vec<Var>,
    /// Features after SSF (equal to `pre_ssf` when SSF is disabled).
    pub post_ssf: Vec<Var>,
}

/// Scalar components of [`ModelParams::local_loss`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub task_clean: f64,
    pub task_adv: f64,
    pub afl: f64,
}

/// How the local objective combines its terms.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    /// Train the adversarial path and the feature-alignment term.
    pub adversarial: bool,
    pub lambda_afl: f64,
}

impl ModelParams {
    pub fn new(config: ModelConfig, backbone: Backbone, phi: SsfParams, trainable: Trainable) -> Result<Self> {
        config.validate()?;
        if backbone.convs.len() != config.channels.len() || phi.points.len() != config.channels.len() {
            return Err(Error::Config("backbone, SSF and config disagree on block count".into()));
        }
        Ok(Self { config, backbone, phi, trainable })
    }

    /// Random backbone, identity SSF, random head.
    pub fn init(config: ModelConfig, trainable: Trainable, rng: &mut SimRng) -> Result<Self> {
        let backbone = Backbone::init(&config, rng)?;
        let phi = SsfParams::init(&config, rng)?;
        Self::new(config, backbone, phi, trainable)
    }

    pub fn set_mode(&mut self, mode: NormMode) {
        for pair in &mut self.backbone.norms {
            pair.set_mode(mode);
        }
    }

    pub fn is_eval(&self) -> bool {
        fn eval(l: &NormLayer) -> bool {
            l.mode() == NormMode::Eval && l.pool().iter().all(eval)
        }
        self.backbone.norms.iter().all(|p| eval(&p.clean) && eval(&p.adversarial))
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable_arrays().into_iter().map(|(n, _)| n).collect()
    }

    /// Named trainable arrays in payload order.
    pub fn trainable_arrays(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        if self.trainable.ssf {
            let pts = &self.phi.points;
            out.extend(pts.iter().enumerate().map(|(d, p)| (format!("gamma_cl/{d}"), &p.gamma_cl)));
            out.extend(pts.iter().enumerate().map(|(d, p)| (format!("beta_cl/{d}"), &p.beta_cl)));
            if self.trainable.dual {
                out.extend(pts.iter().enumerate().map(|(d, p)| (format!("gamma_adv/{d}"), &p.gamma_adv)));
                out.extend(pts.iter().enumerate().map(|(d, p)| (format!("beta_adv/{d}"), &p.beta_adv)));
            }
        } else {
            out.extend(self.backbone.theta_arrays());
        }
        out.push(("head/weight".into(), &self.phi.head.weight));
        out.push(("head/bias".into(), &self.phi.head.bias));
        out
    }

    pub fn trainable_tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        if self.trainable.ssf {
            let dual = self.trainable.dual;
            let mut g_cl = Vec::new();
            let mut b_cl = Vec::new();
            let mut g_adv = Vec::new();
            let mut b_adv = Vec::new();
            for p in &mut self.phi.points {
                g_cl.push(&mut p.gamma_cl);
                b_cl.push(&mut p.beta_cl);
                g_adv.push(&mut p.gamma_adv);
                b_adv.push(&mut p.beta_adv);
            }
            out.extend(g_cl);
            out.extend(b_cl);
            if dual {
                out.extend(g_adv);
                out.extend(b_adv);
            }
        } else {
            for c in &mut self.backbone.convs {
                out.push(&mut c.kernel);
                out.push(&mut c.bias);
            }
        }
        out.push(&mut self.phi.head.weight);
        out.push(&mut self.phi.head.bias);
        out
    }

    pub fn trainable_count(&self) -> usize {
        self.trainable_arrays().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Parameters a full fine-tune would train and exchange: `θ` plus the head.
    pub fn full_model_count(&self) -> usize {
        self.backbone.theta_count() + self.phi.head.weight.numel() + self.phi.head.bias.numel()
    }

    /// Overwrites the trainable arrays from `(name, tensor)` pairs, which must
    /// match [`Self::trainable_arrays`] exactly in names and shapes.
    pub fn set_trainable(&mut self, arrays: &[(String, Tensor)]) -> Result<()> {
        let names = self.trainable_names();
        if names.len() != arrays.len() {
            return Err(Error::Protocol(format!("expected {} arrays, got {}", names.len(), arrays.len())));
        }
        for ((expected, (name, t)), dst) in names.iter().zip(arrays).zip(self.trainable_arrays()) {
            if expected != name || dst.1.shape() != t.shape() {
                return Err(Error::Protocol(format!("array {name} {:?} does not match {expected} {:?}", t.shape(), dst.1.shape())));
            }
        }
        for (dst, (_, src)) in self.trainable_tensors_mut().into_iter().zip(arrays) {
            dst.clone_from(src);
        }
        Ok(())
    }

    /// Registers every array on `tape`. With `grads`, trainable arrays are
    /// gradient-carrying leaves; everything else is a constant.
    pub fn bind(&self, tape: &mut Tape, grads: bool) -> ModelVars {
        let ssf = self.trainable.ssf;
        let train_theta = grads && !ssf;
        let theta: Vec<(Var, Var)> = self
            .backbone
            .convs
            .iter()
            .map(|c| (tape.leaf(c.kernel.clone(), train_theta), tape.leaf(c.bias.clone(), train_theta)))
            .collect();
        let mut bind_path = |path: Path, on: bool| -> Vec<(Var, Var)> {
            self.phi
                .points
                .iter()
                .map(|p| {
                    let (g, b) = p.select(path);
                    (tape.leaf(g.clone(), on), tape.leaf(b.clone(), on))
                })
                .collect()
        };
        let ssf_cl = bind_path(Path::Clean, grads && ssf);
        let ssf_adv = bind_path(Path::Adversarial, grads && ssf && self.trainable.dual);
        let head = (tape.leaf(self.phi.head.weight.clone(), grads), tape.leaf(self.phi.head.bias.clone(), grads));
        let mut trainable = Vec::new();
        if ssf {
            trainable.extend(ssf_cl.iter().map(|p| p.0));
            trainable.extend(ssf_cl.iter().map(|p| p.1));
            if self.trainable.dual {
                trainable.extend(ssf_adv.iter().map(|p| p.0));
                trainable.extend(ssf_adv.iter().map(|p| p.1));
            }
        } else {
            for &(k, b) in &theta {
                trainable.push(k);
                trainable.push(b);
            }
        }
        trainable.push(head.0);
        trainable.push(head.1);
        ModelVars { theta, ssf_cl, ssf_adv, head, trainable, apply_ssf: ssf }
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<()> {
        let s = tape.value(x).shape();
        let c = &self.config;
        if s.len() != 4 || s[1] != c.in_channels || s[2] != c.image_size || s[3] != c.image_size {
            return Err(dim_err(
                "forward",
                format!("expected N×{}×{}×{}, got {s:?}", c.in_channels, c.image_size, c.image_size),
            ));
        }
        Ok(())
    }

    /// Forward pass honoring each normalization layer's mode (train mode
    /// updates statistics and draws RNA members from `rng`).
    pub fn forward_tape(&mut self, tape: &mut Tape, vars: &ModelVars, x: Var, path: Path, rng: &mut SimRng) -> Result<Trace> {
        self.check_input(tape, x)?;
        let (stride, padding) = (self.config.stride, self.config.padding);
        let norms = &mut self.backbone.norms;
        run_network(tape, vars, x, path, stride, padding, &mut |d, tape, h| match path {
            Path::Clean => norms[d].clean.normalize(tape, h, rng),
            Path::Adversarial => norms[d].adversarial.normalize(tape, h, rng),
        })
    }

    /// Eval-mode forward pass; never mutates the model.
    pub fn forward_eval_tape(&self, tape: &mut Tape, vars: &ModelVars, x: Var, path: Path) -> Result<Trace> {
        self.check_input(tape, x)?;
        let norms = &self.backbone.norms;
        run_network(tape, vars, x, path, self.config.stride, self.config.padding, &mut |d, tape, h| match path {
            Path::Clean => norms[d].clean.normalize_eval(tape, h),
            Path::Adversarial => norms[d].adversarial.normalize_eval(tape, h),
        })
    }

    /// Recomputes batch-norm statistics of `path` exactly from one batch.
    pub fn calibrate(&mut self, x: &Tensor, path: Path) -> Result<()> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        self.check_input(&tape, xv)?;
        let (stride, padding) = (self.config.stride, self.config.padding);
        let norms = &mut self.backbone.norms;
        run_network(&mut tape, &vars, xv, path, stride, padding, &mut |d, tape, h| match path {
            Path::Clean => norms[d].clean.calibrate(tape, h),
            Path::Adversarial => norms[d].adversarial.calibrate(tape, h),
        })?;
        Ok(())
    }

    /// Predictions `N × outputs` for `x`, in the layers' current mode.
    pub fn forward(&mut self, x: &Tensor, path: Path, rng: &mut SimRng) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let trace = self.forward_tape(&mut tape, &vars, xv, path, rng)?;
        Ok(tape.value(trace.prediction).clone())
    }

    /// Eval-mode predictions.
    pub fn predict(&self, x: &Tensor, path: Path) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let trace = self.forward_eval_tape(&mut tape, &vars, xv, path)?;
        Ok(tape.value(trace.prediction).clone())
    }

    /// Builds the local objective on `tape` and returns the loss node with its parts.
    ///
    /// `task(clean) + task(adv) + λ·AFL` when the objective is adversarial,
    /// otherwise `task(clean)` alone.
    pub fn local_loss_tape(
        &mut self,
        tape: &mut Tape,
        vars: &ModelVars,
        x_clean: &Tensor,
        x_adv: Option<&Tensor>,
        labels: &Tensor,
        objective: Objective,
        rng: &mut SimRng,
    ) -> Result<(Var, LossParts)> {
        if !(objective.lambda_afl >= 0.0) {
            return Err(Error::Config(format!("lambda_afl must be non-negative, got {}", objective.lambda_afl)));
        }
        let n = x_clean.shape().first().copied().unwrap_or(0);
        if labels.shape() != [n, self.config.outputs] {
            return Err(dim_err("local_loss", format!("labels {:?} for batch of {n}", labels.shape())));
        }
        let y = tape.constant(labels.clone());
        let xc = tape.constant(x_clean.clone());
        let clean = self.forward_tape(tape, vars, xc, Path::Clean, rng)?;
        let task_clean = tape.mse(clean.prediction, y)?;
        if !objective.adversarial {
            let v = tape.value(task_clean).data()[0];
            return Ok((task_clean, LossParts { total: v, task_clean: v, task_adv: 0.0, afl: 0.0 }));
        }
        let x_adv = x_adv.ok_or_else(|| Error::Contract("adversarial objective needs an adversarial batch".into()))?;
        if x_adv.shape() != x_clean.shape() {
            return Err(Error::Contract(format!("unpaired batches {:?} and {:?}", x_clean.shape(), x_adv.shape())));
        }
        let xa = tape.constant(x_adv.clone());
        let adv = self.forward_tape(tape, vars, xa, Path::Adversarial, rng)?;
        let task_adv = tape.mse(adv.prediction, y)?;
        let afl = afl_term(tape, &clean.post_ssf, &adv.post_ssf)?;
        let tasks = tape.add(task_clean, task_adv)?;
        let weighted = tape.scale(afl, objective.lambda_afl)?;
        let total = tape.add(tasks, weighted)?;
        let val = |t: &Tape, v: Var| t.value(v).data()[0];
        let parts = LossParts {
            total: val(tape, total),
            task_clean: val(tape, task_clean),
            task_adv: val(tape, task_adv),
            afl: val(tape, afl),
        };
        Ok((total, parts))
    }

    /// Loss value and gradients of every trainable array (in payload order).
    pub fn loss_and_grads(
        &mut self,
        x_clean: &Tensor,
        x_adv: Option<&Tensor>,
        labels: &Tensor,
        objective: Objective,
        rng: &mut SimRng,
    ) -> Result<(LossParts, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, true);
        let (loss, parts) = self.local_loss_tape(&mut tape, &vars, x_clean, x_adv, labels, objective, rng)?;
        tape.backward(loss)?;
        Ok((parts, vars.trainable.iter().map(|&v| tape.grad(v)).collect()))
    }

    /// The feature-alignment loss between paired clean and adversarial batches.
    pub fn afl_loss(&mut self, x_clean: &Tensor, x_adv: &Tensor, rng: &mut SimRng) -> Result<f64> {
        if x_clean.shape() != x_adv.shape() {
            return Err(Error::Contract(format!("unpaired batches {:?} and {:?}", x_clean.shape(), x_adv.shape())));
        }
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let xc = tape.constant(x_clean.clone());
        let xa = tape.constant(x_adv.clone());
        let clean = self.forward_tape(&mut tape, &vars, xc, Path::Clean, rng)?;
        let adv = self.forward_tape(&mut tape, &vars, xa, Path::Adversarial, rng)?;
        let afl = afl_term(&mut tape, &clean.post_ssf, &adv.post_ssf)?;
        tape.value(afl).item()
    }

    /// Folds the selected SSF copy into the backbone. Requires eval mode so
    /// that every batch-norm layer has fixed statistics.
    pub fn merge_ssf(&self, policy: MergePolicy) -> Result<MergedModel> {
        if !self.is_eval() {
            return Err(Error::Contract("merge requires eval mode (frozen normalization statistics)".into()));
        }
        let mut blocks = Vec::with_capacity(self.backbone.convs.len());
        for (d, conv) in self.backbone.convs.iter().enumerate() {
            let pair = &self.backbone.norms[d];
            let point = &self.phi.points[d];
            let (layer, gamma, beta): (&NormLayer, Vec<f64>, Vec<f64>) = match policy {
                MergePolicy::Clean => (&pair.clean, point.gamma_cl.data().to_vec(), point.beta_cl.data().to_vec()),
                MergePolicy::Adversarial => (&pair.adversarial, point.gamma_adv.data().to_vec(), point.beta_adv.data().to_vec()),
                MergePolicy::Average => (
                    &pair.clean,
                    average(point.gamma_cl.data(), point.gamma_adv.data()),
                    average(point.beta_cl.data(), point.beta_adv.data()),
                ),
            };
            let (gamma, beta) = if self.trainable.ssf {
                (gamma, beta)
            } else {
                (vec![1.0; gamma.len()], vec![0.0; beta.len()])
            };
            blocks.push(MergedBlock {
                kernel: conv.kernel.clone(),
                bias: conv.bias.clone(),
                norm: InferenceNorm::fold(layer, &gamma, &beta)?,
            });
        }
        Ok(MergedModel {
            blocks,
            head: self.phi.head.clone(),
            stride: self.config.stride,
            padding: self.config.padding,
            input_shape: [self.config.in_channels, self.config.image_size, self.config.image_size],
        })
    }

    /// Same network with the SSF copy of `policy` replaced by explicit
    /// parameters; used to check merges against the wrapped forward.
    pub fn with_ssf_values(&self, policy: MergePolicy) -> ModelParams {
        let mut out = self.clone();
        if policy == MergePolicy::Average {
            for p in &mut out.phi.points {
                let g = average(p.gamma_cl.data(), p.gamma_adv.data());
                let b = average(p.beta_cl.data(), p.beta_adv.data());
                p.gamma_cl = Tensor::from_parts(p.gamma_cl.shape().to_vec(), g);
                p.beta_cl = Tensor::from_parts(p.beta_cl.shape().to_vec(), b);
            }
        }
        out
    }
}

/// A view of a model's eval-mode forward along one path, as seen by an attacker.
#[derive(Debug, Clone, Copy)]
pub struct PathView<'a> {
    pub model: &'a ModelParams,
    pub path: Path,
}

impl AttackTarget for PathView<'_> {
    fn predict_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let vars = self.model.bind(tape, false);
        Ok(self.model.forward_eval_tape(tape, &vars, x, self.path)?.prediction)
    }
}

fn average(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| (x + y) / 2.0).collect()
}

fn run_network(
    tape: &mut Tape,
    vars: &ModelVars,
    x: Var,
    path: Path,
    stride: usize,
    padding: usize,
    norm: &mut dyn FnMut(usize, &mut Tape, Var) -> Result<Var>,
) -> Result<Trace> {
    let mut h = x;
    let mut pre_ssf = Vec::with_capacity(vars.theta.len());
    let mut post_ssf = Vec::with_capacity(vars.theta.len());
    let ssf = match path {
        Path::Clean => &vars.ssf_cl,
        Path::Adversarial => &vars.ssf_adv,
    };
    for (d, &(k, b)) in vars.theta.iter().enumerate() {
        h = tape.conv2d(h, k, Some(b), stride, padding)?;
        h = norm(d, tape, h)?;
        pre_ssf.push(h);
        if vars.apply_ssf {
            let (g, s) = ssf[d];
            h = tape.channel_affine(h, Some(g), Some(s))?;
        }
        post_ssf.push(h);
        h = tape.relu(h)?;
    }
    let pooled = tape.moment_pool(h)?;
    let linear = tape.matmul(pooled, vars.head.0)?;
    let prediction = tape.channel_affine(linear, None, Some(vars.head.1))?;
    Ok(Trace { prediction, pre_ssf, post_ssf })
}

/// `y = γ ⊙ x + β` per channel of an `N×C×…` tensor.
pub fn ssf_apply(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let c = x.shape().get(1).copied().unwrap_or(0);
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(dim_err("ssf_apply", format!("{c} channels, γ {:?}, β {:?}", gamma.shape(), beta.shape())));
    }
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(gamma.clone());
    let b = tape.constant(beta.clone());
    let y = tape.channel_affine(xv, Some(g), Some(b))?;
    Ok(tape.value(y).clone())
}

/// `(1/L) Σ_d (1/N) Σ_n ‖clean_d[n] − adv_d[n]‖²` over post-SSF features.
pub fn afl_term(tape: &mut Tape, clean: &[Var], adv: &[Var]) -> Result<Var> {
    if clean.len() != adv.len() || clean.is_empty() {
        return Err(Error::Contract(format!("{} clean vs {} adversarial insertion points", clean.len(), adv.len())));
    }
    let mut terms = Vec::with_capacity(clean.len());
    for (&c, &a) in clean.iter().zip(adv) {
        let n = tape.value(c).shape()[0];
        if tape.value(a).shape()[0] != n {
            return Err(Error::Contract("unpaired batch sizes".into()));
        }
        let diff = tape.sub(c, a)?;
        let sq = tape.square(diff)?;
        let total = tape.sum(sq)?;
        terms.push(tape.scale(total, 1.0 / n as f64)?);
    }
    tape.mean_of(&terms)
}

/// Eval-mode normalization with the SSF affine folded in.
#[derive(Debug, Clone, PartialEq)]
pub enum InferenceNorm {
    /// Batch norm with frozen statistics and SSF collapsed into `a·x + c`.
    Affine { scale: Vec<f64>, shift: Vec<f64> },
    /// Per-sample standardization followed by the SSF affine.
    Standardize { axes: StatAxes, eps: f64, scale: Vec<f64>, shift: Vec<f64> },
    /// Mean of pool members' outputs, each with SSF folded in.
    Average(Vec<InferenceNorm>),
}

impl InferenceNorm {
    fn fold(layer: &NormLayer, gamma: &[f64], beta: &[f64]) -> Result<Self> {
        Ok(match layer.kind() {
            NormKind::Bn => {
                let (scale, shift) = layer.folded_affine(Some(gamma), Some(beta))?;
                InferenceNorm::Affine { scale, shift }
            }
            NormKind::Rna => InferenceNorm::Average(
                layer.pool().iter().map(|m| InferenceNorm::fold(m, gamma, beta)).collect::<Result<_>>()?,
            ),
            kind => {
                let axes = match kind {
                    NormKind::Ln => StatAxes::Sample,
                    NormKind::In => StatAxes::SampleChannel,
                    _ => StatAxes::SampleGroup { groups: layer.groups() },
                };
                InferenceNorm::Standardize { axes, eps: layer.eps(), scale: gamma.to_vec(), shift: beta.to_vec() }
            }
        })
    }

    fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let affine = |tape: &mut Tape, x: Var, scale: &[f64], shift: &[f64]| {
            let s = tape.constant(Tensor::from_parts(vec![scale.len()], scale.to_vec()));
            let b = tape.constant(Tensor::from_parts(vec![shift.len()], shift.to_vec()));
            tape.channel_affine(x, Some(s), Some(b))
        };
        match self {
            InferenceNorm::Affine { scale, shift } => affine(tape, x, scale, shift),
            InferenceNorm::Standardize { axes, eps, scale, shift } => {
                let (y, _) = tape.standardize(x, *axes, *eps)?;
                affine(tape, y, scale, shift)
            }
            InferenceNorm::Average(members) => {
                let outs = members.iter().map(|m| m.apply(tape, x)).collect::<Result<Vec<_>>>()?;
                tape.mean_of(&outs)
            }
        }
    }

    fn param_count(&self) -> usize {
        match self {
            InferenceNorm::Affine { scale, shift } | InferenceNorm::Standardize { scale, shift, .. } => scale.len() + shift.len(),
            InferenceNorm::Average(m) => m.iter().map(InferenceNorm::param_count).sum(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedBlock {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub norm: InferenceNorm,
}

/// Inference model with no SSF layers left.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedModel {
    pub blocks: Vec<MergedBlock>,
    pub head: Head,
    pub stride: usize,
    pub padding: usize,
    pub input_shape: [usize; 3],
}

impl MergedModel {
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = self.predict_on(&mut tape, xv)?;
        Ok(tape.value(y).clone())
    }

    /// Every value the inference model carries: convolutions, folded
    /// normalization constants, head.
    pub fn param_count(&self) -> usize {
        self.blocks.iter().map(|b| b.kernel.numel() + b.bias.numel() + b.norm.param_count()).sum::<usize>()
            + self.head.weight.numel()
            + self.head.bias.numel()
    }
}

impl AttackTarget for MergedModel {
    fn predict_on(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.value(x).shape();
        if s.len() != 4 || s[1..] != self.input_shape {
            return Err(dim_err("merged forward", format!("expected N×{:?}, got {s:?}", self.input_shape)));
        }
        let mut h = x;
        for b in &self.blocks {
            let k = tape.constant(b.kernel.clone());
            let bias = tape.constant(b.bias.clone());
            h = tape.conv2d(h, k, Some(bias), self.stride, self.padding)?;
            h = b.norm.apply(tape, h)?;
            h = tape.relu(h)?;
        }
        let pooled = tape.moment_pool(h)?;
        let w = tape.constant(self.head.weight.clone());
        let bias = tape.constant(self.head.bias.clone());
        let linear = tape.matmul(pooled, w)?;
        tape.channel_affine(linear, None, Some(bias))
    }
}
