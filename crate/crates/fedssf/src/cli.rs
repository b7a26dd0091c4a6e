//! Command-line surface. Every subcommand accepts `--config`, `--seed` and
//! `--out`, writes its CSV outputs atomically into the output directory and
//! maps failures to exit codes (1 config, 2 numeric, 3 IO).

use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use fedssf_core::attack;
use fedssf_core::experiment::{self, evaluate, runway_splits};
use fedssf_core::rng::{stream, stream_rng};
use fedssf_core::Tensor;
use serde::Serialize;

use crate::config::ExperimentConfig;
use crate::error::{AppError, AppResult};
use crate::io::{self, atomic_write};
use crate::metrics::{pct, write_csv, write_jsonl, MetricsRecord};
use crate::pipeline::{self, round_records, run_id, Runner};

#[derive(Debug, Parser)]
#[command(name = "fedssf", version, about = "Federated adversarial SSF fine-tuning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory, overriding the configuration.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Client worker threads, overriding the configuration.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pre-train the backbone on lane images.
    Pretrain(Common),
    /// Federated fine-tuning, merge and per-round evaluation.
    Train {
        #[command(flatten)]
        common: Common,
        /// Pre-trained backbone to start from instead of pre-training.
        #[arg(long)]
        backbone: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the test split.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Write attacked copies of the test split.
    AttackGen {
        #[command(flatten)]
        common: Common,
        /// Model to attack; the untrained merged model when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// One run per client count.
    SweepClients {
        #[command(flatten)]
        common: Common,
        /// Comma-separated client counts; the configuration's list when omitted.
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<usize>>,
    },
    /// One run per (clean, adversarial) normalization pair.
    SweepNorm(Common),
    /// All eight on/off combinations of AFL, FL and SSF.
    Ablate(Common),
    /// List the arrays of a checkpoint.
    InspectCheckpoint {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

struct Context {
    cfg: ExperimentConfig,
    out: PathBuf,
}

fn context(common: &Common) -> AppResult<Context> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seeds.master = s;
    }
    if let Some(t) = common.threads {
        cfg.output.threads = t;
    }
    if let Some(o) = &common.out {
        cfg.output.dir = o.to_string_lossy().into_owned();
    }
    cfg.spec()?;
    let out = PathBuf::from(&cfg.output.dir);
    std::fs::create_dir_all(&out).map_err(|e| AppError::io(&out, e))?;
    atomic_write(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    Ok(Context { cfg, out })
}

#[derive(Serialize)]
struct PretrainRow {
    epoch: usize,
    loss: f64,
}

#[derive(Serialize)]
struct Summary<'a> {
    run_id: String,
    config_hash: String,
    wall_time_secs: f64,
    backbone_params: usize,
    trainable_per_client: usize,
    trainable_total: usize,
    merged_params: usize,
    uplink_bytes: usize,
    downlink_bytes: usize,
    comm_ratio: f64,
    theta_unchanged: bool,
    records: &'a [MetricsRecord],
}

#[derive(Serialize)]
struct AttackRow {
    attack: String,
    epsilon: f64,
    max_linf: f64,
    clean_error: String,
    adv_error: String,
}

#[derive(Serialize)]
struct InspectRow {
    name: String,
    group: String,
    shape: String,
    numel: usize,
}

pub fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Pretrain(common) => {
            let ctx = context(&common)?;
            let spec = ctx.cfg.spec()?;
            let pre = experiment::pretrain(spec.seed, &spec.model, &spec.data, &spec.pretrain)?;
            io::save_backbone(&pre, &ctx.out.join("backbone.fssf"))?;
            let rows: Vec<PretrainRow> =
                pre.epoch_losses.iter().enumerate().map(|(i, &loss)| PretrainRow { epoch: i + 1, loss }).collect();
            write_csv(&ctx.out.join("pretrain.csv"), &rows)?;
        }
        Command::Train { common, backbone } => {
            let ctx = context(&common)?;
            let spec = ctx.cfg.spec()?;
            let start = Instant::now();
            let mut runner = Runner::new(ctx.cfg.output.threads);
            if let Some(p) = backbone {
                runner.preload(&spec, io::load_backbone(&p, &spec.model)?);
            }
            let out = runner.run(&spec)?;
            let mut records = round_records(&ctx.cfg, &out);
            let wall = start.elapsed().as_secs_f64();
            if let Some(last) = records.last_mut() {
                last.wall_time_secs = wall;
            }
            write_csv(&ctx.out.join("metrics.csv"), &records)?;
            write_jsonl(&ctx.out.join("metrics.jsonl"), &records)?;
            io::save_checkpoint(&out.central, &ctx.out.join("checkpoint.fssf"))?;
            let total = out.ledger.total();
            let summary = Summary {
                run_id: run_id(&ctx.cfg),
                config_hash: ctx.cfg.hash(),
                wall_time_secs: wall,
                backbone_params: out.census.backbone,
                trainable_per_client: out.census.trainable_per_client,
                trainable_total: out.census.trainable_total,
                merged_params: out.census.merged,
                uplink_bytes: total.uplink,
                downlink_bytes: total.downlink,
                comm_ratio: out.ledger.ratio(),
                theta_unchanged: !spec.ablation.ssf || out.central.backbone.theta_bytes() == out.theta_before,
                records: &records,
            };
            let json = serde_json::to_vec_pretty(&summary).expect("summary always serializes");
            atomic_write(&ctx.out.join("summary.json"), &json)?;
        }
        Command::Evaluate { common, checkpoint } => {
            let ctx = context(&common)?;
            let spec = ctx.cfg.spec()?;
            let model = io::load_checkpoint(&checkpoint, &spec.model, spec.trainable())?;
            let merged = model.merge_ssf(spec.effective_merge_policy())?;
            let splits = runway_splits(spec.seed, &spec.data)?;
            let eval = evaluate(&merged, &splits.test, &spec.eval_attacks, &mut stream_rng(spec.seed, &[stream::SERVER_EVAL]))?;
            let record = MetricsRecord::from_eval(&run_id(&ctx.cfg), &ctx.cfg.hash(), 0, &eval);
            write_csv(&ctx.out.join("eval.csv"), &[record])?;
        }
        Command::AttackGen { common, checkpoint } => {
            let ctx = context(&common)?;
            let spec = ctx.cfg.spec()?;
            let model = match checkpoint {
                Some(p) => io::load_checkpoint(&p, &spec.model, spec.trainable())?,
                None => {
                    let pre = experiment::pretrain(spec.seed, &spec.model, &spec.data, &spec.pretrain)?;
                    experiment::finetune_model(&spec, &pre)?
                }
            };
            let merged = model.merge_ssf(spec.effective_merge_policy())?;
            let splits = runway_splits(spec.seed, &spec.data)?;
            let (x, y) = splits.test.all()?;
            let clean = fedssf_core::data::detection_error(&merged.predict(&x)?, &y)?;
            let mut rows = Vec::new();
            for (i, cfg) in spec.eval_attacks.iter().enumerate() {
                let mut rng = stream_rng(spec.seed, &[stream::SERVER_EVAL, i as u64]);
                let adv = attack::generate(&merged, &x, &y, cfg, &mut rng)?;
                let err = fedssf_core::data::detection_error(&merged.predict(&adv)?, &y)?;
                let [c, h, w] = splits.test.image_shape();
                let set = fedssf_core::data::Dataset::new([c, h, w], adv.data().to_vec(), y.data().to_vec())?;
                io::save_dataset(&set, &ctx.out.join(format!("adv_{}.fssf", cfg.kind.as_str())))?;
                rows.push(AttackRow {
                    attack: cfg.kind.as_str().into(),
                    epsilon: cfg.epsilon,
                    max_linf: adv.max_abs_diff(&x)?,
                    clean_error: pct(clean),
                    adv_error: pct(err),
                });
            }
            io::save_dataset(&splits.test, &ctx.out.join("clean_test.fssf"))?;
            write_csv(&ctx.out.join("attack.csv"), &rows)?;
        }
        Command::SweepClients { common, counts } => {
            let ctx = context(&common)?;
            let counts = counts.unwrap_or_else(|| ctx.cfg.sweep.clients.clone());
            if counts.is_empty() {
                return Err(AppError::Config("no client counts to sweep".into()));
            }
            let rows = pipeline::sweep_clients(&mut Runner::new(ctx.cfg.output.threads), &ctx.cfg, &counts)?;
            write_csv(&ctx.out.join("sweep_clients.csv"), &rows)?;
        }
        Command::SweepNorm(common) => {
            let ctx = context(&common)?;
            let pairs = ctx.cfg.sweep.norm_pairs()?;
            let cells = pipeline::sweep_norm_grid(&mut Runner::new(ctx.cfg.output.threads), &ctx.cfg, &pairs)?;
            write_csv(&ctx.out.join("norm_cells.csv"), &cells)?;
            let kinds = ctx.cfg.sweep.norm_kinds()?;
            atomic_write(&ctx.out.join("norm_grid.csv"), pipeline::norm_grid_csv(&cells, &kinds).as_bytes())?;
        }
        Command::Ablate(common) => {
            let ctx = context(&common)?;
            let rows = pipeline::ablate(&mut Runner::new(ctx.cfg.output.threads), &ctx.cfg)?;
            write_csv(&ctx.out.join("ablation.csv"), &rows)?;
        }
        Command::InspectCheckpoint { common, checkpoint } => {
            let ctx = context(&common)?;
            let rows: Vec<InspectRow> = io::read_arrays(&checkpoint)?
                .into_iter()
                .map(|a| InspectRow {
                    group: a.name.split('/').next().unwrap_or_default().into(),
                    shape: shape_str(&a.tensor),
                    numel: a.tensor.numel(),
                    name: a.name,
                })
                .collect();
            for r in &rows {
                println!("{:<28} {:>14} {:>8}", r.name, r.shape, r.numel);
            }
            write_csv(&ctx.out.join("inspect.csv"), &rows)?;
        }
    }
    Ok(())
}

fn shape_str(t: &Tensor) -> String {
    t.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x")
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

