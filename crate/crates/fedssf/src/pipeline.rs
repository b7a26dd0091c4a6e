//! Whole runs, sweeps and ablations on top of the core experiment driver.

use std::collections::HashMap;

use fedssf_core::experiment::{self, Ablation, ExperimentSpec, PretrainedBackbone, RunOutcome};
use fedssf_core::norm::NormKind;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::AppResult;
use crate::executor::Threaded;
use crate::metrics::{pct, MetricsRecord};

/// Runs experiments, sharing pre-trained backbones between runs that would
/// produce identical ones.
#[derive(Debug)]
pub struct Runner {
    pub threads: usize,
    cache: HashMap<String, PretrainedBackbone>,
}

fn pretrain_key(spec: &ExperimentSpec) -> String {
    let m = &spec.model;
    format!(
        "{}|{}|{:?}|{}|{}|{}|{}|{:?}",
        spec.seed, m.image_size, m.channels, m.kernel_size, m.stride, m.padding, spec.data.lane, spec.pretrain
    )
}

impl Runner {
    pub fn new(threads: usize) -> Self {
        Self { threads, cache: HashMap::new() }
    }

    /// Supplies a backbone for runs matching `spec`.
    pub fn preload(&mut self, spec: &ExperimentSpec, backbone: PretrainedBackbone) {
        self.cache.insert(pretrain_key(spec), backbone);
    }

    pub fn pretrained(&mut self, spec: &ExperimentSpec) -> AppResult<PretrainedBackbone> {
        let key = pretrain_key(spec);
        if let Some(b) = self.cache.get(&key) {
            return Ok(b.clone());
        }
        let b = experiment::pretrain(spec.seed, &spec.model, &spec.data, &spec.pretrain)?;
        self.cache.insert(key, b.clone());
        Ok(b)
    }

    pub fn run(&mut self, spec: &ExperimentSpec) -> AppResult<RunOutcome> {
        let pre = self.pretrained(spec)?;
        Ok(experiment::run_experiment_with(spec, &pre, &Threaded { threads: self.threads })?)
    }
}

pub fn run_id(cfg: &ExperimentConfig) -> String {
    format!("{}-s{}", cfg.hash(), cfg.seeds.master)
}

pub fn round_records(cfg: &ExperimentConfig, out: &RunOutcome) -> Vec<MetricsRecord> {
    let (id, hash) = (run_id(cfg), cfg.hash());
    out.rounds.iter().map(|r| MetricsRecord::from_round(&id, &hash, r)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClientSweepRow {
    pub clients: usize,
    pub clean_error: String,
    pub adv_error: String,
}

pub fn sweep_clients(runner: &mut Runner, cfg: &ExperimentConfig, counts: &[usize]) -> AppResult<Vec<ClientSweepRow>> {
    let mut rows = Vec::with_capacity(counts.len());
    for &m in counts {
        let mut c = cfg.clone();
        c.federation.clients = m;
        let out = runner.run(&c.spec()?)?;
        let eval = &out.final_metrics().eval;
        rows.push(ClientSweepRow {
            clients: m,
            clean_error: pct(eval.clean_error),
            adv_error: eval.mean_adversarial().map(pct).unwrap_or_default(),
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormCell {
    pub clean_norm: String,
    pub adv_norm: String,
    pub clean_error: String,
    pub adv_error: String,
}

pub fn sweep_norm_grid(runner: &mut Runner, cfg: &ExperimentConfig, pairs: &[(NormKind, NormKind)]) -> AppResult<Vec<NormCell>> {
    let mut cells = Vec::with_capacity(pairs.len());
    for &(clean, adv) in pairs {
        let mut c = cfg.clone();
        c.model.norm_clean = clean.as_str().into();
        c.model.norm_adv = adv.as_str().into();
        let out = runner.run(&c.spec()?)?;
        let eval = &out.final_metrics().eval;
        cells.push(NormCell {
            clean_norm: clean.as_str().into(),
            adv_norm: adv.as_str().into(),
            clean_error: pct(eval.clean_error),
            adv_error: eval.mean_adversarial().map(pct).unwrap_or_default(),
        });
    }
    Ok(cells)
}

/// Square table with clean kinds as rows and adversarial kinds as columns;
/// each cell is the adversarial error.
pub fn norm_grid_csv(cells: &[NormCell], kinds: &[NormKind]) -> String {
    let mut out = String::from("clean\\adv");
    for k in kinds {
        out.push(',');
        out.push_str(&k.as_str().to_uppercase());
    }
    out.push('\n');
    for c in kinds {
        out.push_str(&c.as_str().to_uppercase());
        for a in kinds {
            out.push(',');
            if let Some(cell) = cells.iter().find(|x| x.clean_norm == c.as_str() && x.adv_norm == a.as_str()) {
                out.push_str(&cell.adv_error);
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub afl: bool,
    pub fl: bool,
    pub ssf: bool,
    pub clean_error: String,
    pub adv_error: String,
    pub trainable_per_client: usize,
    pub trainable_total: usize,
    pub backbone_params: usize,
    pub merged_params: usize,
}

pub fn ablation_row(ab: Ablation, out: &RunOutcome) -> AblationRow {
    let eval = &out.final_metrics().eval;
    AblationRow {
        afl: ab.afl,
        fl: ab.fl,
        ssf: ab.ssf,
        clean_error: pct(eval.clean_error),
        adv_error: eval.mean_adversarial().map(pct).unwrap_or_default(),
        trainable_per_client: out.census.trainable_per_client,
        trainable_total: out.census.trainable_total,
        backbone_params: out.census.backbone,
        merged_params: out.census.merged,
    }
}

pub fn ablate(runner: &mut Runner, cfg: &ExperimentConfig) -> AppResult<Vec<AblationRow>> {
    let mut rows = Vec::with_capacity(8);
    for ab in Ablation::all() {
        let mut c = cfg.clone();
        c.ablation.afl = ab.afl;
        c.ablation.fl = ab.fl;
        c.ablation.ssf = ab.ssf;
        let out = runner.run(&c.spec()?)?;
        rows.push(ablation_row(ab, &out));
    }
    Ok(rows)
}
