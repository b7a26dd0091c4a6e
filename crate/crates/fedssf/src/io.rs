//! Files: atomic writes, checkpoints, pre-trained backbones and datasets,
//! all stored in the FSSF array container.

use std::collections::BTreeMap;
use std::path::Path;

use fedssf_core::container::{self, DType, NamedArray};
use fedssf_core::data::Dataset;
use fedssf_core::experiment::PretrainedBackbone;
use fedssf_core::model::{Backbone, ConvParams, ModelConfig, ModelParams, SsfParams, Trainable};
use fedssf_core::norm::{NormKind, NormLayer, NormMode, RunningStats};
use fedssf_core::rng::stream_rng;
use fedssf_core::Tensor;

use crate::error::{AppError, AppResult};

/// Writes through a sibling temporary file and a rename.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> AppResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| AppError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
}

pub fn write_arrays(path: &Path, arrays: &[(String, Tensor)]) -> AppResult<()> {
    let refs: Vec<(&str, &Tensor)> = arrays.iter().map(|(n, t)| (n.as_str(), t)).collect();
    atomic_write(path, &container::encode(&refs, DType::F64))
}

pub fn read_arrays(path: &Path) -> AppResult<Vec<NamedArray>> {
    let bytes = std::fs::read(path).map_err(|e| AppError::io(path, e))?;
    container::decode(&bytes).map_err(|source| AppError::Decode { path: path.into(), source })
}

const PATHS: [&str; 2] = ["clean", "adversarial"];

fn push_stats(out: &mut Vec<(String, Tensor)>, prefix: &str, layer: &NormLayer) -> AppResult<()> {
    if let Some(s) = layer.running().filter(|s| s.initialized) {
        out.push((format!("{prefix}/mean"), Tensor::vector(&s.mean)?));
        out.push((format!("{prefix}/var"), Tensor::vector(&s.var)?));
    }
    for (k, m) in layer.pool().iter().enumerate() {
        push_stats(out, &format!("{prefix}/{k}"), m)?;
    }
    Ok(())
}

/// Every array of a model: `theta`, the four SSF groups, `head` and the
/// batch-norm buffers under `stats`.
pub fn model_arrays(model: &ModelParams) -> AppResult<Vec<(String, Tensor)>> {
    let mut out: Vec<(String, Tensor)> = model.backbone.theta_arrays().into_iter().map(|(n, t)| (n, t.clone())).collect();
    let pts = &model.phi.points;
    for (group, get) in [
        ("gamma_cl", (|p| &p.gamma_cl) as fn(&fedssf_core::model::SsfPoint) -> &Tensor),
        ("beta_cl", |p| &p.beta_cl),
        ("gamma_adv", |p| &p.gamma_adv),
        ("beta_adv", |p| &p.beta_adv),
    ] {
        out.extend(pts.iter().enumerate().map(|(d, p)| (format!("{group}/{d}"), get(p).clone())));
    }
    out.push(("head/weight".into(), model.phi.head.weight.clone()));
    out.push(("head/bias".into(), model.phi.head.bias.clone()));
    for (d, pair) in model.backbone.norms.iter().enumerate() {
        push_stats(&mut out, &format!("stats/{}/{d}", PATHS[0]), &pair.clean)?;
        push_stats(&mut out, &format!("stats/{}/{d}", PATHS[1]), &pair.adversarial)?;
    }
    Ok(out)
}

pub fn save_checkpoint(model: &ModelParams, path: &Path) -> AppResult<()> {
    write_arrays(path, &model_arrays(model)?)
}

struct ArrayMap(BTreeMap<String, Tensor>);

impl ArrayMap {
    fn new(arrays: Vec<NamedArray>) -> Self {
        Self(arrays.into_iter().map(|a| (a.name, a.tensor)).collect())
    }

    fn take(&mut self, name: &str, shape: &[usize]) -> AppResult<Tensor> {
        let t = self.0.remove(name).ok_or_else(|| AppError::Config(format!("checkpoint lacks array {name}")))?;
        if t.shape() != shape {
            return Err(AppError::Config(format!("array {name} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(t)
    }

    fn stats(&mut self, prefix: &str, layer: &mut NormLayer) -> AppResult<()> {
        if layer.kind() == NormKind::Bn && self.0.contains_key(&format!("{prefix}/mean")) {
            let c = layer.channels();
            let mean = self.take(&format!("{prefix}/mean"), &[c])?.into_data();
            let var = self.take(&format!("{prefix}/var"), &[c])?.into_data();
            layer.set_running(RunningStats { mean, var, initialized: true })?;
        }
        for (k, m) in layer.pool_mut().iter_mut().enumerate() {
            self.stats(&format!("{prefix}/{k}"), m)?;
        }
        Ok(())
    }

    fn finish(self) -> AppResult<()> {
        match self.0.keys().next() {
            Some(extra) => Err(AppError::Config(format!("unexpected checkpoint array {extra}"))),
            None => Ok(()),
        }
    }
}

/// Rebuilds a model of architecture `config` from a checkpoint, in eval mode.
pub fn load_checkpoint(path: &Path, config: &ModelConfig, trainable: Trainable) -> AppResult<ModelParams> {
    let mut arrays = ArrayMap::new(read_arrays(path)?);
    let mut rng = stream_rng(0, &[]);
    let mut backbone = Backbone::init(config, &mut rng)?;
    let mut phi = SsfParams::init(config, &mut rng)?;
    for (d, c) in backbone.convs.iter_mut().enumerate() {
        c.kernel = arrays.take(&format!("theta/{d}/kernel"), c.kernel.shape())?;
        c.bias = arrays.take(&format!("theta/{d}/bias"), c.bias.shape())?;
    }
    for (d, p) in phi.points.iter_mut().enumerate() {
        let shape = p.gamma_cl.shape().to_vec();
        p.gamma_cl = arrays.take(&format!("gamma_cl/{d}"), &shape)?;
        p.beta_cl = arrays.take(&format!("beta_cl/{d}"), &shape)?;
        p.gamma_adv = arrays.take(&format!("gamma_adv/{d}"), &shape)?;
        p.beta_adv = arrays.take(&format!("beta_adv/{d}"), &shape)?;
    }
    phi.head.weight = arrays.take("head/weight", phi.head.weight.shape())?;
    phi.head.bias = arrays.take("head/bias", phi.head.bias.shape())?;
    for (d, pair) in backbone.norms.iter_mut().enumerate() {
        arrays.stats(&format!("stats/{}/{d}", PATHS[0]), &mut pair.clean)?;
        arrays.stats(&format!("stats/{}/{d}", PATHS[1]), &mut pair.adversarial)?;
    }
    arrays.finish()?;
    let mut model = ModelParams::new(config.clone(), backbone, phi, trainable)?;
    model.set_mode(NormMode::Eval);
    Ok(model)
}

pub fn save_backbone(pre: &PretrainedBackbone, path: &Path) -> AppResult<()> {
    let mut out = Vec::new();
    for (d, c) in pre.convs.iter().enumerate() {
        out.push((format!("theta/{d}/kernel"), c.kernel.clone()));
        out.push((format!("theta/{d}/bias"), c.bias.clone()));
    }
    for (d, s) in pre.bn_stats.iter().enumerate() {
        out.push((format!("stats/bn/{d}/mean"), Tensor::vector(&s.mean)?));
        out.push((format!("stats/bn/{d}/var"), Tensor::vector(&s.var)?));
    }
    if !pre.epoch_losses.is_empty() {
        out.push(("epoch_losses".into(), Tensor::vector(&pre.epoch_losses)?));
    }
    write_arrays(path, &out)
}

pub fn load_backbone(path: &Path, config: &ModelConfig) -> AppResult<PretrainedBackbone> {
    let mut arrays = ArrayMap::new(read_arrays(path)?);
    let reference = Backbone::init(config, &mut stream_rng(0, &[]))?;
    let mut convs = Vec::new();
    let mut bn_stats = Vec::new();
    for (d, c) in reference.convs.iter().enumerate() {
        convs.push(ConvParams {
            kernel: arrays.take(&format!("theta/{d}/kernel"), c.kernel.shape())?,
            bias: arrays.take(&format!("theta/{d}/bias"), c.bias.shape())?,
        });
        let n = c.bias.numel();
        bn_stats.push(RunningStats {
            mean: arrays.take(&format!("stats/bn/{d}/mean"), &[n])?.into_data(),
            var: arrays.take(&format!("stats/bn/{d}/var"), &[n])?.into_data(),
            initialized: true,
        });
    }
    let epoch_losses = arrays.0.remove("epoch_losses").map(Tensor::into_data).unwrap_or_default();
    arrays.finish()?;
    Ok(PretrainedBackbone { convs, bn_stats, epoch_losses })
}

pub fn save_dataset(data: &Dataset, path: &Path) -> AppResult<()> {
    let (x, y) = data.all()?;
    write_arrays(path, &[("images".into(), x), ("labels".into(), y)])
}

pub fn load_dataset(path: &Path) -> AppResult<Dataset> {
    let mut arrays = ArrayMap::new(read_arrays(path)?);
    let images = arrays.0.remove("images").ok_or_else(|| AppError::Config("dataset lacks images".into()))?;
    let labels = arrays.0.remove("labels").ok_or_else(|| AppError::Config("dataset lacks labels".into()))?;
    arrays.finish()?;
    let s = images.shape().to_vec();
    if s.len() != 4 {
        return Err(AppError::Config(format!("images must be N×C×H×W, got {s:?}")));
    }
    Ok(Dataset::new([s[1], s[2], s[3]], images.into_data(), labels.into_data())?)
}
