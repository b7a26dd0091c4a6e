//! End-to-end runs: backbone pre-training on lane images, federated SSF
//! fine-tuning on runway images, server-side calibration, merge and
//! evaluation.

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::attack::{self, AttackConfig, AttackKind};
use crate::container::DType;
use crate::data::{self, Dataset, PartitionScheme};
use crate::error::{Error, Result};
use crate::fed::{self, ClientExecutor, ClientState, LocalConfig, RoundTraffic, ServerState};
use crate::model::{Backbone, ConvParams, MergePolicy, MergedModel, ModelConfig, ModelParams, Objective, Path, PathView, SsfParams, Trainable};
use crate::norm::{NormKind, NormMode, NormSpec, RunningStats};
use crate::optim::{Sgd, SgdConfig};
use crate::rng::{derive_seed, stream, stream_rng, SimRng};
use crate::tensor::Tensor;

/// Samples per forward pass during evaluation and calibration.
pub const EVAL_CHUNK: usize = 200;

#[derive(Debug, Clone, PartialEq)]
pub struct DataSpec {
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub lane: usize,
    pub partition: PartitionScheme,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { image_size: 32, train: 2000, val: 200, test: 400, lane: 1000, partition: PartitionScheme::Equal }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSpec {
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
}

impl Default for PretrainSpec {
    fn default() -> Self {
        Self { epochs: 4, batch_size: 32, sgd: SgdConfig { lr: 0.02, momentum: 0.9, weight_decay: 1e-4 } }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationSpec {
    pub clients: usize,
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub sgd: SgdConfig,
    /// Learning-rate override per client id; missing entries use `sgd.lr`.
    pub client_lr: Vec<f64>,
    pub lambda_afl: f64,
    pub merge_policy: MergePolicy,
    pub payload_dtype: DType,
}

impl Default for FederationSpec {
    fn default() -> Self {
        Self {
            clients: fed::DEFAULT_CLIENTS,
            rounds: 20,
            epochs: 2,
            batch_size: 32,
            sgd: SgdConfig::default(),
            client_lr: Vec::new(),
            lambda_afl: 1e-3,
            merge_policy: MergePolicy::default(),
            payload_dtype: DType::F64,
        }
    }
}

/// Which of adversarial feature learning, federation and SSF are enabled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ablation {
    pub afl: bool,
    pub fl: bool,
    pub ssf: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self { afl: true, fl: true, ssf: true }
    }
}

impl Ablation {
    /// All eight combinations, all-off first and all-on last.
    pub fn all() -> [Ablation; 8] {
        core::array::from_fn(|i| Ablation { afl: i & 4 != 0, fl: i & 2 != 0, ssf: i & 1 != 0 })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentSpec {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataSpec,
    pub pretrain: PretrainSpec,
    pub federation: FederationSpec,
    /// Attack used to craft adversarial training and calibration batches.
    pub train_attack: AttackConfig,
    /// Attacks applied to the test set at every evaluation.
    pub eval_attacks: Vec<AttackConfig>,
    pub ablation: Ablation,
}

impl Default for ExperimentSpec {
    fn default() -> Self {
        let base = AttackConfig::default();
        Self {
            seed: 0,
            model: ModelConfig::default(),
            data: DataSpec::default(),
            pretrain: PretrainSpec::default(),
            federation: FederationSpec::default(),
            train_attack: base,
            eval_attacks: vec![base.with_kind(AttackKind::Fgsm), base.with_kind(AttackKind::Pgd)],
            ablation: Ablation::default(),
        }
    }
}

impl ExperimentSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.model.image_size != self.data.image_size {
            return Err(Error::Config(format!(
                "model image size {} differs from data image size {}",
                self.model.image_size, self.data.image_size
            )));
        }
        if self.data.image_size < data::MIN_IMAGE_SIZE {
            return Err(Error::Config(format!(
                "image size must be at least {}, got {}",
                data::MIN_IMAGE_SIZE,
                self.data.image_size
            )));
        }
        if self.model.outputs != data::LABEL_DIM || self.model.in_channels != 3 {
            return Err(Error::Config("synthetic data needs 3 input channels and 6 outputs".into()));
        }
        let f = &self.federation;
        if f.clients == 0 {
            return Err(Error::Config("client count must be at least 1".into()));
        }
        if f.batch_size == 0 || self.pretrain.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.data.train < f.clients {
            return Err(Error::Config(format!("{} training samples for {} clients", self.data.train, f.clients)));
        }
        if self.data.val == 0 || self.data.test == 0 || self.data.lane == 0 {
            return Err(Error::Config("validation, test and lane sets must be non-empty".into()));
        }
        if !(f.lambda_afl >= 0.0) {
            return Err(Error::Config(format!("lambda_afl must be non-negative, got {}", f.lambda_afl)));
        }
        f.sgd.validate()?;
        self.pretrain.sgd.validate()?;
        for &lr in &f.client_lr {
            SgdConfig { lr, ..f.sgd }.validate()?;
        }
        self.train_attack.validate()?;
        self.eval_attacks.iter().try_for_each(AttackConfig::validate)
    }

    pub fn objective(&self) -> Objective {
        if self.ablation.afl {
            Objective { adversarial: true, lambda_afl: self.federation.lambda_afl }
        } else {
            Objective { adversarial: false, lambda_afl: 0.0 }
        }
    }

    pub fn trainable(&self) -> Trainable {
        Trainable { ssf: self.ablation.ssf, dual: self.ablation.afl }
    }

    pub fn local_config(&self) -> LocalConfig {
        LocalConfig {
            epochs: self.federation.epochs,
            batch_size: self.federation.batch_size,
            objective: self.objective(),
            attack: self.train_attack,
        }
    }

    /// Merge policy actually applied: single-path models always merge the clean path.
    pub fn effective_merge_policy(&self) -> MergePolicy {
        if self.ablation.afl { self.federation.merge_policy } else { MergePolicy::Clean }
    }

    fn client_sgd(&self, id: usize) -> SgdConfig {
        SgdConfig { lr: self.federation.client_lr.get(id).copied().unwrap_or(self.federation.sgd.lr), ..self.federation.sgd }
    }
}

/// Train, validation and test splits of the runway data.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
}

pub fn runway_splits(seed: u64, spec: &DataSpec) -> Result<Splits> {
    let make = |tag: u64, n: usize| Dataset::from_samples(&data::gen_runway(derive_seed(seed, &[tag]), n, spec.image_size)?);
    Ok(Splits {
        train: make(stream::TRAIN_DATA, spec.train)?,
        val: make(stream::VAL_DATA, spec.val)?,
        test: make(stream::TEST_DATA, spec.test)?,
    })
}

pub fn lane_dataset(seed: u64, spec: &DataSpec) -> Result<Dataset> {
    Dataset::from_samples(&data::gen_lanes(derive_seed(seed, &[stream::LANE_DATA]), spec.lane, spec.image_size)?)
}

/// Backbone weights and per-block batch-norm statistics from pre-training.
#[derive(Debug, Clone, PartialEq)]
pub struct PretrainedBackbone {
    pub convs: Vec<ConvParams>,
    pub bn_stats: Vec<RunningStats>,
    /// Mean training loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

fn bn_config(model: &ModelConfig) -> ModelConfig {
    ModelConfig { norm: NormSpec { clean: NormKind::Bn, adversarial: NormKind::Bn, ..model.norm.clone() }, ..model.clone() }
}

/// Trains backbone and a throwaway head on lane images with batch norm,
/// then recomputes exact statistics over the whole lane set.
pub fn pretrain(seed: u64, model: &ModelConfig, data_spec: &DataSpec, spec: &PretrainSpec) -> Result<PretrainedBackbone> {
    let lanes = lane_dataset(seed, data_spec)?;
    let config = bn_config(model);
    let trainable = Trainable { ssf: false, dual: false };
    let mut params = ModelParams::init(config, trainable, &mut stream_rng(seed, &[stream::BACKBONE_INIT]))?;
    let mut rng = stream_rng(seed, &[stream::PRETRAIN]);
    let mut sgd = Sgd::new(spec.sgd);
    let local = LocalConfig {
        epochs: 1,
        batch_size: spec.batch_size,
        objective: Objective { adversarial: false, lambda_afl: 0.0 },
        attack: AttackConfig::default(),
    };
    let data = Arc::new(lanes);
    let mut epoch_losses = Vec::with_capacity(spec.epochs);
    for _ in 0..spec.epochs {
        let mut client = ClientState { id: 0, data: data.clone(), model: params, sgd };
        epoch_losses.push(fed::local_update(&mut client, &local, &mut rng)?.mean_loss);
        params = client.model;
        sgd = client.sgd;
    }
    calibrate_all(&mut params, &data.all()?.0, Path::Clean)?;
    let bn_stats = params
        .backbone
        .norms
        .iter()
        .map(|p| p.clean.running().cloned().ok_or_else(|| Error::Contract("pre-training norm has no statistics".into())))
        .collect::<Result<Vec<_>>>()?;
    Ok(PretrainedBackbone { convs: params.backbone.convs, bn_stats, epoch_losses })
}

/// Exact batch statistics over all of `x`, computed in one pass.
fn calibrate_all(model: &mut ModelParams, x: &Tensor, path: Path) -> Result<()> {
    model.calibrate(x, path)?;
    model.set_mode(NormMode::Eval);
    Ok(())
}

/// Fine-tuning model: frozen pre-trained backbone, seeded statistics and
/// freshly initialized SSF parameters and head.
pub fn finetune_model(spec: &ExperimentSpec, pretrained: &PretrainedBackbone) -> Result<ModelParams> {
    let mut backbone = Backbone::init(&spec.model, &mut stream_rng(spec.seed, &[stream::BACKBONE_INIT]))?;
    if backbone.convs.len() != pretrained.convs.len()
        || backbone.convs.iter().zip(&pretrained.convs).any(|(a, b)| a.kernel.shape() != b.kernel.shape())
    {
        return Err(Error::Config("pre-trained backbone does not match the model architecture".into()));
    }
    backbone.convs = pretrained.convs.clone();
    backbone.seed_bn_statistics(&pretrained.bn_stats)?;
    let phi = SsfParams::init(&spec.model, &mut stream_rng(spec.seed, &[stream::HEAD_INIT]))?;
    let mut model = ModelParams::new(spec.model.clone(), backbone, phi, spec.trainable())?;
    model.set_mode(NormMode::Eval);
    Ok(model)
}

/// Recomputes the server model's batch-norm statistics on the validation
/// split: clean path on clean images, adversarial path on images attacked
/// through the freshly calibrated clean path.
pub fn server_calibrate(model: &mut ModelParams, val: &Dataset, attack_cfg: &AttackConfig, rng: &mut SimRng) -> Result<()> {
    let (x, y) = val.all()?;
    calibrate_all(model, &x, Path::Clean)?;
    if model.trainable.dual {
        let adv = attack::generate(&PathView { model, path: Path::Clean }, &x, &y, attack_cfg, rng)?;
        calibrate_all(model, &adv, Path::Adversarial)?;
    }
    Ok(())
}

/// Clean and per-attack detection errors, in percent.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord {
    pub clean_error: f64,
    pub attacks: Vec<(AttackKind, f64)>,
}

impl EvalRecord {
    /// Mean over attacks; `None` without attacks.
    pub fn mean_adversarial(&self) -> Option<f64> {
        if self.attacks.is_empty() {
            None
        } else {
            Some(self.attacks.iter().map(|(_, e)| e).sum::<f64>() / self.attacks.len() as f64)
        }
    }
}

/// Errors of `model` on `test` and on attacked copies of it. Attacks see the
/// merged model (white box).
pub fn evaluate(model: &MergedModel, test: &Dataset, attacks: &[AttackConfig], rng: &mut SimRng) -> Result<EvalRecord> {
    if test.is_empty() {
        return Err(Error::Config("empty test set".into()));
    }
    let idx: Vec<usize> = (0..test.len()).collect();
    let mut clean_sum = 0.0;
    let mut attack_sums = vec![0.0; attacks.len()];
    for chunk in idx.chunks(EVAL_CHUNK) {
        let (x, y) = test.batch(chunk)?;
        let w = chunk.len() as f64;
        clean_sum += w * data::detection_error(&model.predict(&x)?, &y)?;
        for (s, cfg) in attack_sums.iter_mut().zip(attacks) {
            let adv = attack::generate(model, &x, &y, cfg, rng)?;
            *s += w * data::detection_error(&model.predict(&adv)?, &y)?;
        }
    }
    let n = test.len() as f64;
    Ok(EvalRecord {
        clean_error: clean_sum / n,
        attacks: attacks.iter().zip(attack_sums).map(|(c, s)| (c.kind, s / n)).collect(),
    })
}

/// Per-round metrics.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMetrics {
    pub round: usize,
    pub eval: EvalRecord,
    pub afl_loss: f64,
    pub train_loss: f64,
    pub traffic: RoundTraffic,
}

/// Parameter census of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCensus {
    pub backbone: usize,
    /// Trainable parameters of one participant.
    pub trainable_per_client: usize,
    /// Trainable parameters summed over participants.
    pub trainable_total: usize,
    /// Parameters the merged inference model carries.
    pub merged: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub merged: MergedModel,
    pub central: ModelParams,
    pub rounds: Vec<RoundMetrics>,
    pub census: ParamCensus,
    pub ledger: fed::CommLedger,
    /// Backbone bytes before fine-tuning, for the frozen-backbone check.
    pub theta_before: Vec<u8>,
}

impl RunOutcome {
    pub fn final_metrics(&self) -> &RoundMetrics {
        self.rounds.last().expect("every run records at least one evaluation")
    }
}

/// Runs fine-tuning from an already pre-trained backbone.
pub fn run_experiment_with(spec: &ExperimentSpec, pretrained: &PretrainedBackbone, executor: &dyn ClientExecutor) -> Result<RunOutcome> {
    spec.validate()?;
    let splits = runway_splits(spec.seed, &spec.data)?;
    let model = finetune_model(spec, pretrained)?;
    let theta_before = model.backbone.theta_bytes();
    let participants = if spec.ablation.fl { spec.federation.clients } else { 1 };
    let mut clients = Vec::with_capacity(participants);
    let parts = data::partition(&splits.train, participants, spec.data.partition, &mut stream_rng(spec.seed, &[stream::PARTITION]))?;
    for (id, part) in parts.into_iter().enumerate() {
        clients.push(ClientState::new(id, Arc::new(part), model.clone(), spec.client_sgd(id))?);
    }
    let mut server = ServerState::new(model, spec.federation.payload_dtype);
    let local = spec.local_config();
    let policy = spec.effective_merge_policy();
    let mut rounds = Vec::new();

    if spec.federation.rounds == 0 {
        let merged = server.model.merge_ssf(policy)?;
        let eval = evaluate(&merged, &splits.test, &spec.eval_attacks, &mut stream_rng(spec.seed, &[stream::SERVER_EVAL, 0]))?;
        rounds.push(RoundMetrics { round: 0, eval, afl_loss: 0.0, train_loss: 0.0, traffic: RoundTraffic::default() });
    }
    for r in 0..spec.federation.rounds {
        let (afl_loss, train_loss, traffic) = if spec.ablation.fl {
            let rep = fed::run_round(&mut server, &mut clients, &local, spec.seed, executor)?;
            (rep.mean_afl, rep.mean_loss, rep.traffic)
        } else {
            let client = &mut clients[0];
            let mut rng = stream_rng(spec.seed, &[stream::CLIENT, 0, r as u64]);
            let rep = fed::local_update(client, &local, &mut rng)?;
            let phi: Vec<(String, Tensor)> = client.model.trainable_arrays().into_iter().map(|(n, t)| (n, t.clone())).collect();
            server.model.set_trainable(&phi)?;
            server.round += 1;
            (rep.mean_afl, rep.mean_loss, RoundTraffic::default())
        };
        server_calibrate(&mut server.model, &splits.val, &spec.train_attack, &mut stream_rng(spec.seed, &[stream::CALIBRATION, r as u64]))?;
        let merged = server.model.merge_ssf(policy)?;
        let eval = evaluate(&merged, &splits.test, &spec.eval_attacks, &mut stream_rng(spec.seed, &[stream::SERVER_EVAL, r as u64 + 1]))?;
        rounds.push(RoundMetrics { round: r + 1, eval, afl_loss, train_loss, traffic });
    }
    let merged = server.model.merge_ssf(policy)?;
    let per_client = server.model.trainable_count();
    let census = ParamCensus {
        backbone: server.model.backbone.theta_count(),
        trainable_per_client: per_client,
        trainable_total: per_client * participants,
        merged: merged.param_count(),
    };
    Ok(RunOutcome { merged, central: server.model, rounds, census, ledger: server.ledger, theta_before })
}

/// Pre-trains and fine-tunes.
pub fn run_experiment(spec: &ExperimentSpec, executor: &dyn ClientExecutor) -> Result<RunOutcome> {
    spec.validate()?;
    let pretrained = pretrain(spec.seed, &spec.model, &spec.data, &spec.pretrain)?;
    run_experiment_with(spec, &pretrained, executor)
}
