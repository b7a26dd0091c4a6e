//! Per-round metrics records and table writers. CSV columns are fixed:
//!
//! `run_id, config_hash, round, clean_error, fgsm_error, pgd_error,
//! bim_error, mean_adv_error, afl_loss, train_loss, uplink_bytes,
//! downlink_bytes`
//!
//! Errors are percentages; attack columns are empty when the attack was not
//! evaluated. JSON output holds the same records, one object per line. Wall
//! time is not part of either, so both are reproducible byte for byte; it is
//! written to the run summary instead.

use std::path::Path;

use fedssf_core::attack::AttackKind;
use fedssf_core::experiment::{EvalRecord, RoundMetrics};
use serde::Serialize;

use crate::error::AppResult;
use crate::io::atomic_write;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub run_id: String,
    pub config_hash: String,
    pub round: usize,
    pub clean_error: f64,
    pub fgsm_error: Option<f64>,
    pub pgd_error: Option<f64>,
    pub bim_error: Option<f64>,
    pub mean_adv_error: Option<f64>,
    pub afl_loss: f64,
    pub train_loss: f64,
    pub uplink_bytes: usize,
    pub downlink_bytes: usize,
    #[serde(skip)]
    pub wall_time_secs: f64,
}

impl MetricsRecord {
    pub fn from_eval(run_id: &str, config_hash: &str, round: usize, eval: &EvalRecord) -> Self {
        let pick = |k: AttackKind| eval.attacks.iter().find(|(a, _)| *a == k).map(|(_, e)| *e);
        Self {
            run_id: run_id.into(),
            config_hash: config_hash.into(),
            round,
            clean_error: eval.clean_error,
            fgsm_error: pick(AttackKind::Fgsm),
            pgd_error: pick(AttackKind::Pgd),
            bim_error: pick(AttackKind::Bim),
            mean_adv_error: eval.mean_adversarial(),
            afl_loss: 0.0,
            train_loss: 0.0,
            uplink_bytes: 0,
            downlink_bytes: 0,
            wall_time_secs: 0.0,
        }
    }

    pub fn from_round(run_id: &str, config_hash: &str, r: &RoundMetrics) -> Self {
        Self {
            afl_loss: r.afl_loss,
            train_loss: r.train_loss,
            uplink_bytes: r.traffic.uplink,
            downlink_bytes: r.traffic.downlink,
            ..Self::from_eval(run_id, config_hash, r.round, &r.eval)
        }
    }
}

/// Serializes rows with a header into CSV bytes.
pub fn csv_bytes<T: Serialize>(rows: &[T]) -> AppResult<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> AppResult<()> {
    atomic_write(path, &csv_bytes(rows)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> AppResult<()> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, r).expect("records always serialize");
        out.push(b'\n');
    }
    atomic_write(path, &out)
}

/// Percentages in tables use one decimal.
pub fn pct(v: f64) -> String {
    format!("{v:.1}")
}
