//! TOML experiment configuration. Every field has a default, so an empty
//! file is the default toy experiment.

use std::path::Path;

use fedssf_core::attack::{AttackConfig, AttackKind};
use fedssf_core::container::DType;
use fedssf_core::data::PartitionScheme;
use fedssf_core::experiment::{Ablation, DataSpec, ExperimentSpec, FederationSpec, PretrainSpec};
use fedssf_core::model::{MergePolicy, ModelConfig};
use fedssf_core::norm::{NormKind, NormSpec};
use fedssf_core::optim::SgdConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{AppError, AppResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
#[derive(Default)]
pub struct ExperimentConfig {
    pub seeds: Seeds,
    pub federation: Federation,
    pub attack: Attack,
    pub model: Model,
    pub data: Data,
    pub pretrain: Pretrain,
    pub ablation: AblationToggles,
    pub sweep: Sweep,
    pub output: Output,
}


#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub master: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Federation {
    pub clients: usize,
    pub rounds: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Per-client learning-rate overrides by client id.
    pub client_lr: Vec<f64>,
    pub lambda_afl: f64,
    pub merge_policy: String,
    /// `f64` or `f32` payload elements.
    pub payload_dtype: String,
}

impl Default for Federation {
    fn default() -> Self {
        let f = FederationSpec::default();
        Self {
            clients: f.clients,
            rounds: f.rounds,
            epochs: f.epochs,
            batch_size: f.batch_size,
            lr: f.sgd.lr,
            momentum: f.sgd.momentum,
            weight_decay: f.sgd.weight_decay,
            client_lr: f.client_lr,
            lambda_afl: f.lambda_afl,
            merge_policy: f.merge_policy.as_str().into(),
            payload_dtype: "f64".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Attack {
    /// Attack crafting adversarial training batches.
    pub kind: String,
    /// Attacks applied to the test set.
    pub eval: Vec<String>,
    pub epsilon: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub random_start: bool,
    pub clamp_min: f64,
    pub clamp_max: f64,
}

impl Default for Attack {
    fn default() -> Self {
        let a = AttackConfig::default();
        Self {
            kind: a.kind.as_str().into(),
            eval: vec!["fgsm".into(), "pgd".into()],
            epsilon: a.epsilon,
            step_size: a.step_size,
            iterations: a.iterations,
            random_start: a.random_start,
            clamp_min: a.clamp.0,
            clamp_max: a.clamp.1,
        }
    }
}

impl Attack {
    pub fn config(&self, kind: AttackKind) -> AttackConfig {
        AttackConfig {
            kind,
            epsilon: self.epsilon,
            step_size: self.step_size,
            iterations: self.iterations,
            random_start: self.random_start,
            clamp: (self.clamp_min, self.clamp_max),
        }
    }

    pub fn eval_configs(&self) -> AppResult<Vec<AttackConfig>> {
        self.eval.iter().map(|k| Ok(self.config(parse(k)?))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Model {
    pub channels: Vec<usize>,
    pub kernel_size: usize,
    pub stride: usize,
    pub padding: usize,
    pub norm_clean: String,
    pub norm_adv: String,
    pub rna_pool: Vec<String>,
    pub gn_groups: usize,
    pub norm_eps: f64,
    pub norm_momentum: f64,
    pub head_init_std: f64,
    pub head_init_bias: f64,
}

impl Default for Model {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            channels: m.channels,
            kernel_size: m.kernel_size,
            stride: m.stride,
            padding: m.padding,
            norm_clean: m.norm.clean.as_str().into(),
            norm_adv: m.norm.adversarial.as_str().into(),
            rna_pool: m.norm.rna_pool.iter().map(|k| k.as_str().into()).collect(),
            gn_groups: m.norm.gn_groups,
            norm_eps: m.norm.eps,
            norm_momentum: m.norm.momentum,
            head_init_std: m.head_init_std,
            head_init_bias: m.head_init_bias,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Data {
    pub image_size: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub lane: usize,
    pub partition: String,
}

impl Default for Data {
    fn default() -> Self {
        let d = DataSpec::default();
        Self {
            image_size: d.image_size,
            train: d.train,
            val: d.val,
            test: d.test,
            lane: d.lane,
            partition: d.partition.as_str().into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Pretrain {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for Pretrain {
    fn default() -> Self {
        let p = PretrainSpec::default();
        Self {
            epochs: p.epochs,
            batch_size: p.batch_size,
            lr: p.sgd.lr,
            momentum: p.sgd.momentum,
            weight_decay: p.sgd.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationToggles {
    pub afl: bool,
    pub fl: bool,
    pub ssf: bool,
}

impl Default for AblationToggles {
    fn default() -> Self {
        Self { afl: true, fl: true, ssf: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Sweep {
    pub clients: Vec<usize>,
    pub norm_kinds: Vec<String>,
    /// Explicit `[clean, adversarial]` pairs; empty means the full grid over `norm_kinds`.
    pub norm_pairs: Vec<[String; 2]>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            clients: vec![2, 3, 4, 5, 6, 7],
            norm_kinds: NormKind::ALL.iter().map(|k| k.as_str().into()).collect(),
            norm_pairs: Vec::new(),
        }
    }
}

impl Sweep {
    pub fn norm_kinds(&self) -> AppResult<Vec<NormKind>> {
        self.norm_kinds.iter().map(|k| parse(k)).collect()
    }

    pub fn norm_pairs(&self) -> AppResult<Vec<(NormKind, NormKind)>> {
        if self.norm_pairs.is_empty() {
            let kinds = self.norm_kinds()?;
            return Ok(kinds.iter().flat_map(|&c| kinds.iter().map(move |&a| (c, a))).collect());
        }
        self.norm_pairs.iter().map(|[c, a]| Ok((parse(c)?, parse(a)?))).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Output {
    pub dir: String,
    /// Worker threads for client updates; results do not depend on it.
    pub threads: usize,
}

impl Default for Output {
    fn default() -> Self {
        Self { dir: "runs".into(), threads: 1 }
    }
}

fn parse<T: std::str::FromStr<Err = fedssf_core::Error>>(s: &str) -> AppResult<T> {
    s.parse().map_err(|e: fedssf_core::Error| AppError::Config(e.to_string()))
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> AppResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| AppError::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn from_toml(text: &str) -> AppResult<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| AppError::Config(e.to_string()))?;
        cfg.spec()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration always serializes")
    }

    /// Hex digest of the canonical serialization. Any field outside the
    /// `output` section changes it; output location and thread count do not
    /// affect results and are excluded.
    pub fn hash(&self) -> String {
        let canonical = Self { output: Output::default(), ..self.clone() };
        let digest = Sha256::digest(serde_json::to_vec(&canonical).expect("configuration always serializes"));
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn model_config(&self) -> AppResult<ModelConfig> {
        let m = &self.model;
        let base = ModelConfig::default();
        Ok(ModelConfig {
            image_size: self.data.image_size,
            channels: m.channels.clone(),
            kernel_size: m.kernel_size,
            stride: m.stride,
            padding: m.padding,
            norm: NormSpec {
                clean: parse(&m.norm_clean)?,
                adversarial: parse(&m.norm_adv)?,
                rna_pool: m.rna_pool.iter().map(|k| parse(k)).collect::<AppResult<_>>()?,
                gn_groups: m.gn_groups,
                eps: m.norm_eps,
                momentum: m.norm_momentum,
            },
            head_init_std: m.head_init_std,
            head_init_bias: m.head_init_bias,
            ..base
        })
    }

    /// The validated core specification.
    pub fn spec(&self) -> AppResult<ExperimentSpec> {
        let f = &self.federation;
        let dtype = match f.payload_dtype.as_str() {
            "f64" => DType::F64,
            "f32" => DType::F32,
            other => return Err(AppError::Config(format!("unknown payload dtype {other:?}"))),
        };
        let spec = ExperimentSpec {
            seed: self.seeds.master,
            model: self.model_config()?,
            data: DataSpec {
                image_size: self.data.image_size,
                train: self.data.train,
                val: self.data.val,
                test: self.data.test,
                lane: self.data.lane,
                partition: parse::<PartitionScheme>(&self.data.partition)?,
            },
            pretrain: PretrainSpec {
                epochs: self.pretrain.epochs,
                batch_size: self.pretrain.batch_size,
                sgd: SgdConfig { lr: self.pretrain.lr, momentum: self.pretrain.momentum, weight_decay: self.pretrain.weight_decay },
            },
            federation: FederationSpec {
                clients: f.clients,
                rounds: f.rounds,
                epochs: f.epochs,
                batch_size: f.batch_size,
                sgd: SgdConfig { lr: f.lr, momentum: f.momentum, weight_decay: f.weight_decay },
                client_lr: f.client_lr.clone(),
                lambda_afl: f.lambda_afl,
                merge_policy: parse::<MergePolicy>(&f.merge_policy)?,
                payload_dtype: dtype,
            },
            train_attack: self.attack.config(parse(&self.attack.kind)?),
            eval_attacks: self.attack.eval_configs()?,
            ablation: Ablation { afl: self.ablation.afl, fl: self.ablation.fl, ssf: self.ablation.ssf },
        };
        spec.validate().map_err(|e| AppError::Config(e.to_string()))?;
        self.sweep.norm_pairs()?;
        if self.output.threads == 0 {
            return Err(AppError::Config("output.threads must be at least 1".into()));
        }
        Ok(spec)
    }
}
