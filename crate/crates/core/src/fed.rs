//! Simulated federation: local updates, weighted aggregation of the
//! trainable parameters, round orchestration and byte accounting.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use crate::attack::{self, AttackConfig};
use crate::container::{self, DType};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{ModelParams, Objective, Path, PathView};
use crate::norm::NormMode;
use crate::optim::{Sgd, SgdConfig};
use crate::rng::{self, stream, stream_rng, SimRng};
use crate::tensor::Tensor;

/// Default number of federated clients.
pub const DEFAULT_CLIENTS: usize = 5;
/// Bytes of the fixed message preamble: client id, round and sample count as `u64`.
pub const MESSAGE_PREAMBLE: usize = 24;

/// Local training settings shared by all clients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub objective: Objective,
    pub attack: AttackConfig,
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub data: Arc<Dataset>,
    pub model: ModelParams,
    pub sgd: Sgd,
}

impl ClientState {
    pub fn new(id: usize, data: Arc<Dataset>, model: ModelParams, sgd: SgdConfig) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Config(format!("client {id} has an empty dataset")));
        }
        sgd.validate()?;
        Ok(Self { id, data, model, sgd: Sgd::new(sgd) })
    }

    pub fn sample_count(&self) -> usize {
        self.data.len()
    }
}

/// Per-client summary of one local update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LocalReport {
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_afl: f64,
}

/// Runs `cfg.epochs` passes of minibatch SGD on the trainable parameters.
/// Adversarial batches are regenerated for every minibatch from the
/// client's current eval-mode clean path.
pub fn local_update(client: &mut ClientState, cfg: &LocalConfig, rng: &mut SimRng) -> Result<LocalReport> {
    if client.data.is_empty() {
        return Err(Error::Config(format!("client {} has an empty dataset", client.id)));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut report = LocalReport::default();
    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..client.data.len()).collect();
        rng::shuffle(rng, &mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, y) = client.data.batch(chunk)?;
            let x_adv = if cfg.objective.adversarial {
                client.model.set_mode(NormMode::Eval);
                let view = PathView { model: &client.model, path: Path::Clean };
                let adv = attack::generate(&view, &x, &y, &cfg.attack, rng)?;
                Some(adv)
            } else {
                None
            };
            client.model.set_mode(NormMode::Train);
            let (parts, grads) = client.model.loss_and_grads(&x, x_adv.as_ref(), &y, cfg.objective, rng)?;
            client.sgd.step(client.model.trainable_tensors_mut(), &grads)?;
            report.steps += 1;
            report.mean_loss += parts.total;
            report.mean_afl += parts.afl;
        }
    }
    if report.steps > 0 {
        report.mean_loss /= report.steps as f64;
        report.mean_afl /= report.steps as f64;
    }
    client.model.set_mode(NormMode::Eval);
    Ok(report)
}

/// Named trainable arrays exchanged between a client and the server.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundMessage {
    pub client_id: usize,
    pub round: usize,
    pub payload: Vec<(String, Tensor)>,
    pub sample_count: usize,
}

impl RoundMessage {
    /// Preamble followed by the payload container.
    pub fn encode(&self, dtype: DType) -> Vec<u8> {
        let refs: Vec<(&str, &Tensor)> = self.payload.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let mut out = Vec::with_capacity(MESSAGE_PREAMBLE + container::encoded_len(&refs, dtype));
        out.extend_from_slice(&(self.client_id as u64).to_le_bytes());
        out.extend_from_slice(&(self.round as u64).to_le_bytes());
        out.extend_from_slice(&(self.sample_count as u64).to_le_bytes());
        out.extend(container::encode(&refs, dtype));
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MESSAGE_PREAMBLE {
            return Err(container::DecodeError::Truncated.into());
        }
        let word = |i: usize| u64::from_le_bytes(bytes[8 * i..8 * i + 8].try_into().expect("eight bytes")) as usize;
        let payload = container::decode(&bytes[MESSAGE_PREAMBLE..])?.into_iter().map(|a| (a.name, a.tensor)).collect();
        Ok(Self { client_id: word(0), round: word(1), sample_count: word(2), payload })
    }

    pub fn byte_size(&self, dtype: DType) -> usize {
        let refs: Vec<(&str, &Tensor)> = self.payload.iter().map(|(n, t)| (n.as_str(), t)).collect();
        MESSAGE_PREAMBLE + container::encoded_len(&refs, dtype)
    }

    /// Rejects any array that is not a trainable parameter of `model`.
    pub fn check_trainable_only(&self, model: &ModelParams) -> Result<()> {
        let allowed: BTreeSet<String> = model.trainable_names().into_iter().collect();
        for (name, _) in &self.payload {
            if !allowed.contains(name) {
                return Err(Error::Protocol(format!("payload array {name:?} is not trainable")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct RoundTraffic {
    pub uplink: usize,
    pub downlink: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CommLedger {
    pub rounds: Vec<RoundTraffic>,
    pub trainable_params: usize,
    pub backbone_params: usize,
}

impl CommLedger {
    pub fn new(trainable_params: usize, backbone_params: usize) -> Self {
        Self { rounds: Vec::new(), trainable_params, backbone_params }
    }

    pub fn total(&self) -> RoundTraffic {
        self.rounds.iter().fold(RoundTraffic::default(), |a, r| RoundTraffic {
            uplink: a.uplink + r.uplink,
            downlink: a.downlink + r.downlink,
        })
    }

    pub fn ratio(&self) -> f64 {
        self.trainable_params as f64 / self.backbone_params as f64
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 { a } else { gcd(b, a % b) }
}

/// Weighted mean of client payloads with weights `|D_m| / |D|`, summed in
/// ascending client-id order.
///
/// Weights are applied as reduced integer counts divided by their sum, which
/// is the same quantity and makes the equal-count case the plain arithmetic
/// mean.
pub fn aggregate(messages: &[RoundMessage], total: usize) -> Result<Vec<(String, Tensor)>> {
    let mut sorted: Vec<&RoundMessage> = messages.iter().collect();
    sorted.sort_by_key(|m| m.client_id);
    let first = *sorted.first().ok_or_else(|| Error::Protocol("no client messages to aggregate".into()))?;
    if sorted.windows(2).any(|w| w[0].client_id == w[1].client_id) {
        return Err(Error::Protocol("duplicate client id among messages".into()));
    }
    for m in &sorted[1..] {
        let same = m.payload.len() == first.payload.len()
            && m.payload.iter().zip(&first.payload).all(|((n, t), (n0, t0))| n == n0 && t.shape() == t0.shape());
        if !same {
            return Err(Error::Protocol(format!(
                "client {} payload layout differs from client {}",
                m.client_id, first.client_id
            )));
        }
    }
    let counted: usize = sorted.iter().map(|m| m.sample_count).sum();
    let weight_sum: f64 = sorted.iter().map(|m| m.sample_count as f64 / total as f64).sum();
    if total == 0 || counted != total || (weight_sum - 1.0).abs() > 1e-12 {
        return Err(Error::Accounting(format!("sample counts sum to {counted}, expected {total} (weight sum {weight_sum})")));
    }
    let g = sorted.iter().fold(0, |g, m| gcd(g, m.sample_count));
    let reduced: Vec<f64> = sorted.iter().map(|m| (m.sample_count / g) as f64).collect();
    let denom = (total / g) as f64;
    let mut out = Vec::with_capacity(first.payload.len());
    for (k, (name, t0)) in first.payload.iter().enumerate() {
        let mut acc = alloc::vec![0.0; t0.numel()];
        for (m, &w) in sorted.iter().zip(&reduced) {
            for (a, &v) in acc.iter_mut().zip(m.payload[k].1.data()) {
                *a += w * v;
            }
        }
        acc.iter_mut().for_each(|a| *a /= denom);
        out.push((name.clone(), Tensor::new(t0.shape().to_vec(), acc)?));
    }
    Ok(out)
}

/// Runs the local updates of one round. Implementations may execute clients
/// concurrently; each client owns its RNG stream so the result does not
/// depend on scheduling.
pub trait ClientExecutor {
    fn run(&self, jobs: Vec<ClientJob>) -> Result<Vec<(ClientState, LocalReport)>>;
}

/// One client's local update with its dedicated RNG.
pub struct ClientJob {
    pub client: ClientState,
    pub config: LocalConfig,
    pub rng: SimRng,
}

impl ClientJob {
    pub fn execute(mut self) -> Result<(ClientState, LocalReport)> {
        let report = local_update(&mut self.client, &self.config, &mut self.rng)?;
        Ok((self.client, report))
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Sequential;

impl ClientExecutor for Sequential {
    fn run(&self, jobs: Vec<ClientJob>) -> Result<Vec<(ClientState, LocalReport)>> {
        jobs.into_iter().map(ClientJob::execute).collect()
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    /// Central model: frozen backbone, aggregated trainable parameters and
    /// server-side normalization statistics.
    pub model: ModelParams,
    pub round: usize,
    pub ledger: CommLedger,
    pub dtype: DType,
}

impl ServerState {
    pub fn new(model: ModelParams, dtype: DType) -> Self {
        let ledger = CommLedger::new(model.trainable_count(), model.backbone.theta_count());
        Self { model, round: 0, ledger, dtype }
    }

    pub fn phi(&self) -> Vec<(String, Tensor)> {
        self.model.trainable_arrays().into_iter().map(|(n, t)| (n, t.clone())).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoundReport {
    pub round: usize,
    pub traffic: RoundTraffic,
    pub clients: Vec<LocalReport>,
    /// Sample-weighted mean alignment loss over clients.
    pub mean_afl: f64,
    pub mean_loss: f64,
}

/// Broadcast, local updates, upload and aggregation. The server and client
/// states are only replaced once every step has succeeded.
pub fn run_round(
    server: &mut ServerState,
    clients: &mut Vec<ClientState>,
    cfg: &LocalConfig,
    master_seed: u64,
    executor: &dyn ClientExecutor,
) -> Result<RoundReport> {
    let round = server.round;
    let phi = server.phi();
    let mut traffic = RoundTraffic::default();
    let mut jobs = Vec::with_capacity(clients.len());
    for c in clients.iter() {
        let down = RoundMessage { client_id: c.id, round, payload: phi.clone(), sample_count: 0 };
        let bytes = down.encode(server.dtype);
        traffic.downlink += bytes.len();
        let received = RoundMessage::decode(&bytes)?;
        let mut client = c.clone();
        client.model.set_trainable(&received.payload)?;
        client.sgd.reset();
        jobs.push(ClientJob {
            client,
            config: *cfg,
            rng: stream_rng(master_seed, &[stream::CLIENT, c.id as u64, round as u64]),
        });
    }
    let results = executor.run(jobs)?;
    let mut uplinks = Vec::with_capacity(results.len());
    let total: usize = results.iter().map(|(c, _)| c.sample_count()).sum();
    for (c, _) in &results {
        let up = RoundMessage {
            client_id: c.id,
            round,
            payload: c.model.trainable_arrays().into_iter().map(|(n, t)| (n, t.clone())).collect(),
            sample_count: c.sample_count(),
        };
        up.check_trainable_only(&server.model)?;
        let bytes = up.encode(server.dtype);
        traffic.uplink += bytes.len();
        uplinks.push(RoundMessage::decode(&bytes)?);
    }
    let phi_c = aggregate(&uplinks, total)?;
    let mut model = server.model.clone();
    model.set_trainable(&phi_c)?;

    let weight = |c: &ClientState| c.sample_count() as f64 / total as f64;
    let mean_afl = results.iter().map(|(c, r)| weight(c) * r.mean_afl).sum();
    let mean_loss = results.iter().map(|(c, r)| weight(c) * r.mean_loss).sum();
    let reports = results.iter().map(|(_, r)| *r).collect();
    let mut new_clients: Vec<ClientState> = results.into_iter().map(|(c, _)| c).collect();
    new_clients.sort_by_key(|c| c.id);

    server.model = model;
    server.round += 1;
    server.ledger.rounds.push(traffic);
    *clients = new_clients;
    Ok(RoundReport { round, traffic, clients: reports, mean_afl, mean_loss })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn msg(id: usize, v: f64, n: usize) -> RoundMessage {
        RoundMessage { client_id: id, round: 0, payload: vec![("p".into(), Tensor::scalar(v))], sample_count: n }
    }

    #[test]
    fn aggregation_examples() {
        let out = aggregate(&[msg(0, 0.0, 5), msg(1, 4.0, 5)], 10).unwrap();
        assert_eq!(out[0].1.data()[0], 2.0);
        let out = aggregate(&[msg(1, 4.0, 3), msg(0, 0.0, 1)], 4).unwrap();
        assert_eq!(out[0].1.data()[0], 3.0);
        let out = aggregate(&[msg(3, 0.1234567, 7)], 7).unwrap();
        assert_eq!(out[0].1.data()[0], 0.1234567);
    }

    #[test]
    fn aggregation_errors() {
        assert!(matches!(aggregate(&[msg(0, 0.0, 1), msg(1, 0.0, 1)], 3), Err(Error::Accounting(_))));
        let mut bad = msg(1, 0.0, 1);
        bad.payload[0].1 = Tensor::vector(&[0.0, 1.0]).unwrap();
        assert!(matches!(aggregate(&[msg(0, 0.0, 1), bad], 2), Err(Error::Protocol(_))));
        assert!(matches!(aggregate(&[msg(0, 0.0, 1), msg(0, 0.0, 1)], 2), Err(Error::Protocol(_))));
    }

    #[test]
    fn message_round_trip() {
        let m = msg(4, -1.5, 9);
        let bytes = m.encode(DType::F64);
        assert_eq!(bytes.len(), m.byte_size(DType::F64));
        assert_eq!(RoundMessage::decode(&bytes).unwrap(), m);
    }
}
