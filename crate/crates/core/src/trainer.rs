//! Training loop: poly learning-rate schedule, heavy-ball SGD, deep-supervised
//! loss, JSONL step log and versioned checkpoints.

use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::data::{AugmentConfig, Batch, BatchSampler, DomainDataset, SamplerConfig};
use crate::error::{Error, Result};
use crate::losses::{
    classification_loss_node, downsample_labels, segmentation_loss_node, LossConfig,
};
use crate::model::{ForwardOptions, Model, ModelConfig};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub epochs: usize,
    pub momentum: f64,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub patch: Vec<usize>,
    pub seed: u64,
    /// Rescale the gradient norm of each parameter group to at most this value.
    pub grad_clip: Option<f64>,
    pub epsilon: f64,
    pub prob_clip: f64,
    pub augment: AugmentConfig,
    /// Write a checkpoint every this many epochs (the final one is always written).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 0.01,
            epochs: 200,
            momentum: 0.99,
            steps_per_epoch: 50,
            batch_size: 32,
            patch: vec![256, 256],
            seed: 0,
            grad_clip: Some(12.0),
            epsilon: 1e-5,
            prob_clip: 1e-7,
            augment: AugmentConfig::default(),
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::config("lr0 must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.epochs == 0 || self.steps_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs, steps per epoch and batch size must be positive"));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::config("gradient clip must be positive"));
            }
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::config("checkpoint cadence must be positive"));
        }
        self.augment.validate()
    }

    pub fn loss_config(&self, scales: usize) -> LossConfig {
        LossConfig {
            epsilon: self.epsilon,
            prob_clip: self.prob_clip,
            ..LossConfig::for_scales(scales)
        }
    }
}

/// `lr0 * (1 - t / T)^0.9` for `0 <= t <= T`.
pub fn poly_lr(t: usize, lr0: f64, max_epoch: usize) -> Result<f64> {
    if max_epoch == 0 || t > max_epoch {
        return Err(Error::invalid(format!("epoch {t} outside 0..={max_epoch}")));
    }
    Ok(lr0 * (1.0 - t as f64 / max_epoch as f64).powf(0.9))
}

/// Heavy-ball momentum: `v = mu v + g`, `p -= lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    momentum: f64,
    velocity: Vec<Tensor>,
}

impl Sgd {
    pub fn new(store: &ParamStore, momentum: f64) -> Self {
        Self {
            momentum,
            velocity: store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }

    /// `grads[i]` is the gradient of parameter `i`, `None` meaning zero.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>], lr: f64) -> Result<()> {
        if grads.len() != self.velocity.len() {
            return Err(Error::shape("gradient list does not match the parameter store"));
        }
        let mu = self.momentum as f32;
        let lr = lr as f32;
        for ((id, v), g) in store.ids().collect::<Vec<_>>().into_iter().zip(&mut self.velocity).zip(grads) {
            match g {
                Some(g) => {
                    if g.shape() != v.shape() {
                        return Err(Error::shape(format!("gradient for {} has shape {:?}", store.name(id), g.shape())));
                    }
                    for (vi, &gi) in v.data_mut().iter_mut().zip(g.data()) {
                        *vi = mu * *vi + gi;
                    }
                }
                None => v.scale(mu),
            }
            for (p, &vi) in store.get_mut(id).data_mut().iter_mut().zip(v.data()) {
                *p -= lr * vi;
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub l_cls: Option<f64>,
    pub l_seg: Vec<f64>,
    pub total: f64,
    pub grad_norm: f64,
    pub domains: Vec<usize>,
}

/// Training graph of one batch with its loss terms.
pub struct LossGraph {
    pub graph: Graph,
    pub root: Var,
    pub l_cls: Option<f64>,
    pub l_seg: Vec<f64>,
    pub domain_features: Option<Tensor>,
}

/// Runs single optimization steps on prepared batches.
pub struct Trainer<'m> {
    model: &'m mut Model,
    sgd: Sgd,
    loss: LossConfig,
    grad_clip: Option<f64>,
}

impl<'m> Trainer<'m> {
    pub fn new(model: &'m mut Model, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let loss = cfg.loss_config(model.supervised_scales().len());
        loss.validate()?;
        let sgd = Sgd::new(model.store(), cfg.momentum);
        Ok(Self {
            model,
            sgd,
            loss,
            grad_clip: cfg.grad_clip,
        })
    }

    pub fn model(&self) -> &Model {
        self.model
    }

    pub fn sgd(&self) -> &Sgd {
        &self.sgd
    }

    /// Build the training graph for `batch`.
    pub fn loss_graph(model: &Model, batch: &Batch, loss: &LossConfig) -> Result<LossGraph> {
        let mut g = Graph::new();
        let x = g.constant(batch.images.clone());
        let out = model.forward(&mut g, x, &ForwardOptions::default())?;
        let spatial = batch.images.spatial().to_vec();
        let mut terms = Vec::with_capacity(out.probs.len() + 1);
        let mut seg = Vec::with_capacity(out.probs.len());
        for (i, (&s, &p)) in out.scales.iter().zip(&out.probs).enumerate() {
            let factor = 1usize << s;
            let targets: Vec<Vec<u8>> = batch
                .labels
                .iter()
                .map(|l| downsample_labels(l, &spatial, factor))
                .collect();
            let (node, value) = segmentation_loss_node(&mut g, p, &targets, loss)?;
            terms.push((node, loss.scale_weights[i] as f32));
            seg.push(value);
        }
        let cls = match out.domain_code {
            Some(code) => {
                let (node, value) = classification_loss_node(&mut g, code, &batch.sources, loss.prob_clip)?;
                terms.push((node, 1.0));
                Some(value)
            }
            None => None,
        };
        let root = g.weighted_sum(&terms);
        let domain_features = out.domain_features.map(|v| g.value(v).clone());
        Ok(LossGraph {
            graph: g,
            root,
            l_cls: cls,
            l_seg: seg,
            domain_features,
        })
    }

    pub fn step(&mut self, batch: &Batch, lr: f64, epoch: usize, step: usize) -> Result<StepRecord> {
        let LossGraph {
            graph: g,
            root,
            l_cls,
            l_seg,
            domain_features,
        } = Self::loss_graph(self.model, batch, &self.loss)?;
        let total = l_cls.unwrap_or(0.0)
            + l_seg
                .iter()
                .zip(&self.loss.scale_weights)
                .map(|(l, w)| l * w)
                .sum::<f64>();
        if !total.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("l_cls={l_cls:?} l_seg={l_seg:?} lr={lr}"),
            });
        }
        let grads = g.backward(root);
        let store = self.model.store();
        let mut list: Vec<Option<Tensor>> = store.ids().map(|id| grads.param(id).cloned()).collect();
        let norm = list
            .iter()
            .flatten()
            .flat_map(|t| t.data())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::NonFiniteLoss {
                step,
                detail: format!("gradient norm {norm} (loss {total})"),
            });
        }
        if let Some(clip) = self.grad_clip {
            for (_, ids) in self.model.param_groups() {
                let group_norm = ids
                    .iter()
                    .filter_map(|id| list[id.index()].as_ref())
                    .flat_map(|t| t.data())
                    .map(|&v| (v as f64) * (v as f64))
                    .sum::<f64>()
                    .sqrt();
                if group_norm > clip {
                    let s = (clip / group_norm) as f32;
                    for id in ids {
                        if let Some(t) = list[id.index()].as_mut() {
                            t.scale(s);
                        }
                    }
                }
            }
        }
        self.sgd.step(self.model.store_mut(), &list, lr)?;
        if let Some(f) = domain_features {
            self.model.update_domain_statistics(&f)?;
        }
        Ok(StepRecord {
            epoch,
            step,
            lr,
            l_cls,
            l_seg,
            total,
            grad_norm: norm,
            domains: batch.domain_ids.clone(),
        })
    }
}

/// Where `train` writes its artifacts.
#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub dir: PathBuf,
}

impl TrainOutput {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<StepRecord>,
    pub final_loss: f64,
    /// Domain ids that appeared in any training batch.
    pub seen_domains: BTreeSet<usize>,
    pub checkpoint: Option<PathBuf>,
}

/// Train `model` on the given source domains. The model's `K` must equal the
/// number of datasets; images are normalized per case before sampling.
pub fn train(
    model: &mut Model,
    sources: &[DomainDataset],
    cfg: &TrainConfig,
    output: Option<&TrainOutput>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let mcfg = model.config().clone();
    if mcfg.variant.has_domain_predictor() {
        if sources.len() < 2 {
            return Err(Error::config(format!(
                "variant {} needs at least two source domains",
                mcfg.variant
            )));
        }
        if sources.len() != mcfg.num_domains {
            return Err(Error::config(format!(
                "model expects {} source domains, got {}",
                mcfg.num_domains,
                sources.len()
            )));
        }
    }
    let normalized: Vec<DomainDataset> = sources.iter().map(DomainDataset::normalized).collect();
    let sampler_cfg = SamplerConfig {
        patch: cfg.patch.clone(),
        batch_size: cfg.batch_size,
        divisor: mcfg.backbone.divisor(),
        strict: mcfg.backbone.strict,
        augment: cfg.augment.clone(),
    };
    let mut sampler = BatchSampler::new(normalized, sampler_cfg, cfg.seed)?;
    let mut log_writer = match output {
        Some(o) => {
            fs::create_dir_all(&o.dir)?;
            Some(BufWriter::new(File::create(o.log_path())?))
        }
        None => None,
    };
    let mut trainer = Trainer::new(model, cfg)?;
    let mut log = Vec::with_capacity(cfg.epochs * cfg.steps_per_epoch);
    let mut seen = BTreeSet::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = poly_lr(epoch, cfg.lr0, cfg.epochs)?;
        for _ in 0..cfg.steps_per_epoch {
            let batch = sampler.next_batch()?;
            seen.extend(batch.domain_ids.iter().copied());
            let rec = match trainer.step(&batch, lr, epoch, step) {
                Ok(r) => r,
                Err(e @ Error::NonFiniteLoss { .. }) => {
                    if let Some(o) = output {
                        dump_state(o, trainer.model(), step, &e)?;
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some(w) = log_writer.as_mut() {
                serde_json::to_writer(&mut *w, &rec)?;
                w.write_all(b"\n")?;
            }
            log::debug!("epoch {epoch} step {step} loss {:.5}", rec.total);
            log.push(rec);
            step += 1;
        }
        log::info!(
            "epoch {epoch}: lr {lr:.5} loss {:.5}",
            log.last().map_or(f64::NAN, |r| r.total)
        );
        if let (Some(o), Some(every)) = (output, cfg.checkpoint_every) {
            if (epoch + 1) % every == 0 && epoch + 1 < cfg.epochs {
                let meta = CheckpointMeta::new(trainer.model().config(), cfg, epoch + 1, step, sampler.rng());
                save_checkpoint(&o.dir.join(format!("epoch_{:04}.ckpt", epoch + 1)), trainer.model(), Some(trainer.sgd()), &meta)?;
            }
        }
    }
    if let Some(w) = log_writer.as_mut() {
        w.flush()?;
    }
    let checkpoint = match output {
        Some(o) => {
            let meta = CheckpointMeta::new(trainer.model().config(), cfg, cfg.epochs, step, sampler.rng());
            let path = o.checkpoint_path();
            save_checkpoint(&path, trainer.model(), Some(trainer.sgd()), &meta)?;
            Some(path)
        }
        None => None,
    };
    let final_loss = log.last().map_or(f64::NAN, |r| r.total);
    Ok(TrainOutcome {
        log,
        final_loss,
        seen_domains: seen,
        checkpoint,
    })
}

fn dump_state(out: &TrainOutput, model: &Model, step: usize, err: &Error) -> Result<()> {
    let norms: Vec<(String, f64)> = model
        .store()
        .ids()
        .map(|id| {
            let t = model.store().get(id);
            let n = t.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            (model.store().name(id).to_string(), n)
        })
        .collect();
    let dump = serde_json::json!({
        "step": step,
        "error": err.to_string(),
        "param_norms": norms,
    });
    fs::create_dir_all(&out.dir)?;
    fs::write(out.dir.join("nonfinite_dump.json"), serde_json::to_vec_pretty(&dump)?)?;
    Ok(())
}

const MAGIC: &[u8; 8] = b"DCACCKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub train: Option<TrainConfig>,
    pub epoch: usize,
    pub step: usize,
    pub rng: Option<RngState>,
}

impl CheckpointMeta {
    pub fn new(model: &ModelConfig, train: &TrainConfig, epoch: usize, step: usize, rng: &ChaCha8Rng) -> Self {
        Self {
            model: model.clone(),
            train: Some(train.clone()),
            epoch,
            step,
            rng: Some(RngState::capture(rng)),
        }
    }

    pub fn model_only(model: &ModelConfig) -> Self {
        Self {
            model: model.clone(),
            train: None,
            epoch: 0,
            step: 0,
            rng: None,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    params: Vec<TensorEntry>,
    has_velocity: bool,
}

pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: ParamStore,
    pub velocity: Option<Vec<Tensor>>,
}

impl Checkpoint {
    pub fn into_model(self) -> Result<Model> {
        Model::from_params(self.meta.model.clone(), &self.params)
    }
}

/// Layout: magic, `u32` version, `u64` header length, JSON header, then the
/// parameters (and optionally the momentum buffers) as little-endian `f32`.
pub fn save_checkpoint(path: &Path, model: &Model, sgd: Option<&Sgd>, meta: &CheckpointMeta) -> Result<()> {
    let store = model.store();
    let header = Header {
        meta: meta.clone(),
        params: store
            .entries()
            .map(|(name, t)| TensorEntry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
        has_velocity: sgd.is_some(),
    };
    let json = serde_json::to_vec(&header)?;
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        let write_tensor = |w: &mut BufWriter<File>, t: &Tensor| -> Result<()> {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
            Ok(())
        };
        for (_, t) in store.entries() {
            write_tensor(&mut w, t)?;
        }
        if let Some(sgd) = sgd {
            for t in sgd.velocity() {
                write_tensor(&mut w, t)?;
            }
        }
        w.flush()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    File::open(path)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let bad = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(20..20 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut pos = 20 + hlen;
    let mut read_tensor = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let raw = bytes.get(pos..pos + 4 * n).ok_or_else(|| bad("truncated tensor data"))?;
        pos += 4 * n;
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        Tensor::from_vec(shape, data)
    };
    let mut params = ParamStore::new();
    let mut shapes = Vec::with_capacity(header.params.len());
    for e in &header.params {
        params.add(e.name.clone(), read_tensor(&e.shape)?);
        shapes.push(e.shape.clone());
    }
    let velocity = if header.has_velocity {
        Some(shapes.iter().map(|s| read_tensor(s)).collect::<Result<Vec<_>>>()?)
    } else {
        None
    };
    if pos != bytes.len() {
        return Err(bad("trailing bytes after tensor data"));
    }
    Ok(Checkpoint {
        meta: header.meta,
        params,
        velocity,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_lr_examples() {
        assert_eq!(poly_lr(0, 0.01, 200).unwrap(), 0.01);
        assert_eq!(poly_lr(200, 0.01, 200).unwrap(), 0.0);
        assert!((poly_lr(100, 0.01, 200).unwrap() - 0.01 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!(poly_lr(201, 0.01, 200).is_err());
    }

    #[test]
    fn heavy_ball_two_steps() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::scalar(1.0));
        let mut sgd = Sgd::new(&store, 0.9);
        sgd.step(&mut store, &[Some(Tensor::scalar(0.5))], 0.1).unwrap();
        // v1 = 0.5, p1 = 1 - 0.05
        assert!((store.get(id).item() - 0.95).abs() < 1e-7);
        sgd.step(&mut store, &[Some(Tensor::scalar(0.25))], 0.1).unwrap();
        // v2 = 0.9 * 0.5 + 0.25 = 0.7, p2 = 0.95 - 0.07
        assert!((store.get(id).item() - 0.88).abs() < 1e-6);
        sgd.step(&mut store, &[None], 0.1).unwrap();
        // v3 = 0.63, p3 = 0.88 - 0.063
        assert!((store.get(id).item() - 0.817).abs() < 1e-6);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr0: 0.0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { epochs: 0, ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn rng_state_round_trip() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let _: u64 = rng.random();
        let state = RngState::capture(&rng);
        let mut back = state.restore();
        assert_eq!(rng.random::<u64>(), back.random::<u64>());
    }
}
