//! Training loop, early stopping, freeze masks and checkpoints.

use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{batch_order_hash, make_batches, Examples};
use crate::error::{Error, Result};
use crate::eval::{batch_logits, predict};
use crate::models::{forward, Model, ModelSpec};
use crate::nn::optim::{adam_step, clip_grad_norm, cosine_lr, AdamConfig, AdamState};
use crate::nn::{cross_entropy_with_grad, loss_coefficients, Gradients, Graph, LossMode, ParamStore, Tensor};
use crate::rng::{self, purpose};

/// Minimum gain in validation accuracy that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub lr0: f64,
    pub betas: [f64; 2],
    pub adam_eps: f64,
    pub batch_size: usize,
    pub loss_mode: LossMode,
    pub seed: u64,
    /// Glob patterns over parameter names; matches are not updated.
    pub freeze_mask: Vec<String>,
    /// Global gradient-norm ceiling; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 30,
            patience: 5,
            lr0: 1e-4,
            betas: [0.9, 0.999],
            adam_eps: 1e-8,
            batch_size: 16,
            loss_mode: LossMode::Macro,
            seed: 0,
            freeze_mask: Vec::new(),
            clip_norm: 5.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::config("train.max_epochs", "must be ≥ 1"));
        }
        if self.patience == 0 {
            return Err(Error::config("train.patience", "must be ≥ 1"));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::config("train.lr0", "must be positive"));
        }
        if self.betas.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::config("train.betas", "each beta must lie in [0, 1)"));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("train.adam_eps", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be ≥ 1"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("train.clip_norm", "must be ≥ 0"));
        }
        for p in &self.freeze_mask {
            glob::Pattern::new(p)
                .map_err(|e| Error::config("train.freeze_mask", format!("`{p}`: {e}")))?;
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            beta1: self.betas[0],
            beta2: self.betas[1],
            eps: self.adam_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    pub batch_hash: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_acc: f64,
    pub stop_reason: StopReason,
    pub total_steps: usize,
    pub steps_taken: usize,
    pub frozen_params: usize,
}

impl TrainHistory {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["epoch", "train_loss", "val_loss", "val_acc", "lr"])?;
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.train_loss.to_string(),
                e.val_loss.to_string(),
                e.val_acc.to_string(),
                e.lr.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Patience counter over validation accuracy.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    pub fn update(&mut self, epoch: usize, val_acc: f64) -> StopDecision {
        let improved = val_acc >= self.best + MIN_IMPROVEMENT;
        if improved {
            self.best = val_acc;
            self.best_epoch = epoch;
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        StopDecision {
            improved,
            stop: self.stale >= self.patience,
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

/// Mark every parameter matching any pattern as frozen; returns how many
/// tensors were frozen. Patterns that match nothing only warn.
pub fn apply_freeze_mask(store: &mut ParamStore, patterns: &[String]) -> Result<usize> {
    let compiled = patterns
        .iter()
        .map(|p| {
            glob::Pattern::new(p)
                .map_err(|e| Error::config("train.freeze_mask", format!("`{p}`: {e}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut hits = vec![0usize; compiled.len()];
    let mut frozen = Vec::new();
    for name in store.names() {
        let mut any = false;
        for (h, pat) in hits.iter_mut().zip(&compiled) {
            if pat.matches(name) {
                *h += 1;
                any = true;
            }
        }
        if any {
            frozen.push(name.to_string());
        }
    }
    for (p, h) in patterns.iter().zip(&hits) {
        if *h == 0 {
            log::warn!("freeze pattern `{p}` matches no parameter");
        }
    }
    for n in &frozen {
        store.set_trainable(n, false)?;
    }
    Ok(frozen.len())
}

/// Mean loss and accuracy in eval mode.
pub fn validate(model: &Model, data: &dyn Examples, mode: LossMode) -> Result<(f64, f64)> {
    let logits = batch_logits(model, data)?;
    let labels = data.labels();
    let (loss, _) = cross_entropy_with_grad(&logits, &labels, mode, None)?;
    let correct = predict(&logits)
        .iter()
        .zip(&labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok((loss, correct as f64 / labels.len() as f64))
}

struct SampleGrad {
    loss: f64,
    grads: Gradients,
}

fn sample_step(
    model: &Model,
    data: &dyn Examples,
    idx: usize,
    coef: f64,
    epoch: usize,
    step: usize,
    seed: u64,
) -> Result<SampleGrad> {
    let input = data.input(idx, epoch)?;
    let mut g = Graph::new(&model.store);
    let mut r = rng::stream(&[purpose::MODEL, seed, step as u64, idx as u64]);
    let z = forward(&model.spec, &mut g, &input, &mut r, true)?;
    let k = g.value(z).len();
    let row = g.value(z).clone().reshape(&[1, k])?;
    let (nll, dz) = cross_entropy_with_grad(&row, &[data.label(idx)], LossMode::Mean, None)?;
    if !nll.is_finite() {
        let why = g.check_finite().err().map_or_else(|| "loss overflow".to_string(), |e| e.to_string());
        return Err(Error::Training(format!("non-finite loss on sample {idx}: {why}")));
    }
    let mut seed_t = dz.reshape(&[k])?;
    seed_t.data_mut().iter_mut().for_each(|v| *v *= coef);
    Ok(SampleGrad {
        loss: coef * nll,
        grads: g.backward(z, Some(&seed_t))?,
    })
}

/// One training-mode forward and backward pass on the first example;
/// returns its loss and gradient norm. Parameters are left untouched.
pub fn smoke_step(model: &Model, data: &dyn Examples, seed: u64) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::config("dataset", "training split is empty"));
    }
    let s = sample_step(model, data, 0, 1.0, 1, 0, seed)?;
    if !s.grads.is_finite() {
        return Err(Error::Training("non-finite gradient in smoke step".into()));
    }
    Ok((s.loss, s.grads.global_norm()))
}

/// Train in place. On return `model` holds the weights of the best
/// validation epoch.
pub fn train(
    model: &mut Model,
    train_set: &dyn Examples,
    val_set: &dyn Examples,
    cfg: &TrainConfig,
) -> Result<TrainHistory> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::config("dataset", "training split is empty"));
    }
    if val_set.is_empty() {
        return Err(Error::config("dataset", "validation split is empty"));
    }
    let frozen_params = apply_freeze_mask(&mut model.store, &cfg.freeze_mask)?;
    let k = model.spec.head.n_classes;
    let n = train_set.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.max_epochs * batches_per_epoch;
    let adam = cfg.adam();
    let mut state = AdamState::new(&model.store);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_store = model.store.clone();
    let mut epochs = Vec::new();
    let mut step = 0usize;
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let batches = make_batches(n, cfg.batch_size, cfg.seed, epoch as u64);
        let batch_hash = batch_order_hash(&batches);
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for (b, batch) in batches.iter().enumerate() {
            let labels: Vec<usize> = batch.iter().map(|&i| train_set.label(i)).collect();
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::Label(format!("label {bad} outside [0, {k})")));
            }
            let coefs = loss_coefficients(&labels, k, cfg.loss_mode, None);
            let m: &Model = model;
            let parts = batch
                .par_iter()
                .zip(&coefs)
                .map(|(&i, &c)| sample_step(m, train_set, i, c, epoch, step, cfg.seed))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::Training(msg) => {
                        Error::Training(format!("epoch {epoch}, batch {b}: {msg}"))
                    }
                    other => other,
                })?;
            let mut grads = Gradients::empty(model.store.len());
            let mut loss = 0.0;
            for p in &parts {
                grads.accumulate(&p.grads);
                loss += p.loss;
            }
            drop(parts);
            if !grads.is_finite() {
                return Err(Error::Training(format!(
                    "epoch {epoch}, batch {b}: non-finite gradient"
                )));
            }
            if cfg.clip_norm > 0.0 {
                clip_grad_norm(&mut grads, cfg.clip_norm);
            }
            lr = cosine_lr(step, total_steps, cfg.lr0);
            adam_step(&mut model.store, &mut state, &grads, lr, &adam)?;
            loss_sum += loss;
            step += 1;
        }
        let (val_loss, val_acc) = validate(model, val_set, cfg.loss_mode)?;
        let train_loss = loss_sum / batches.len() as f64;
        log::info!(
            "epoch {epoch}: train_loss {train_loss:.4} val_loss {val_loss:.4} val_acc {val_acc:.4} lr {lr:.3e}"
        );
        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            lr,
            batch_hash,
        });
        let d = stopper.update(epoch, val_acc);
        if d.improved {
            best_store = model.store.clone();
        }
        if d.stop && epoch < cfg.max_epochs {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
    }
    model.store = best_store;
    Ok(TrainHistory {
        epochs,
        best_epoch: stopper.best_epoch(),
        best_val_acc: stopper.best(),
        stop_reason,
        total_steps,
        steps_taken: step,
        frozen_params,
    })
}

// ---------------------------------------------------------------------------
// Checkpoints

const CKPT_MAGIC: &[u8; 8] = b"SERFCKPT";
pub const CKPT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub tensors: Vec<TensorEntry>,
    /// Free-form context such as the experiment config.
    #[serde(default)]
    pub extra: serde_json::Value,
}

/// Layout: magic, u32 version, u64 metadata length, metadata JSON, then
/// every tensor as little-endian f32 in metadata order.
pub fn save_checkpoint(path: &Path, model: &Model, extra: serde_json::Value) -> Result<()> {
    let meta = CheckpointMeta {
        spec: model.spec.clone(),
        tensors: model
            .store
            .iter()
            .map(|(n, p)| TensorEntry {
                name: n.to_string(),
                shape: p.value.shape().to_vec(),
                trainable: p.trainable,
            })
            .collect(),
        extra,
    };
    let meta_json = serde_json::to_vec(&meta)?;
    let mut buf = Vec::with_capacity(meta_json.len() + 4 * model.store.num_scalars() + 20);
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(meta_json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&meta_json);
    for (_, p) in model.store.iter() {
        for &v in p.value.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn ckpt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Checkpoint(format!("{}: {msg}", path.display()))
}

/// Read a checkpoint into a standalone store plus its metadata.
pub fn load_checkpoint(path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    let bytes = fs::read(path)?;
    let rest = bytes
        .strip_prefix(CKPT_MAGIC)
        .ok_or_else(|| ckpt_err(path, "not a checkpoint (bad magic)"))?;
    let take = |r: &[u8], n: usize| -> Result<(Vec<u8>, usize)> {
        r.get(..n)
            .map(|s| (s.to_vec(), n))
            .ok_or_else(|| ckpt_err(path, "truncated header"))
    };
    let (v, _) = take(rest, 4)?;
    let version = u32::from_le_bytes(v.try_into().unwrap());
    if version != CKPT_VERSION {
        return Err(ckpt_err(
            path,
            format!("version {version}, this build reads version {CKPT_VERSION}"),
        ));
    }
    let (l, _) = take(&rest[4..], 8)?;
    let meta_len = u64::from_le_bytes(l.try_into().unwrap()) as usize;
    let meta_bytes = rest
        .get(12..12usize.saturating_add(meta_len))
        .ok_or_else(|| ckpt_err(path, "truncated metadata"))?;
    let meta: CheckpointMeta =
        serde_json::from_slice(meta_bytes).map_err(|e| ckpt_err(path, format!("metadata: {e}")))?;
    let mut payload = &rest[12 + meta_len..];
    let mut store = ParamStore::new();
    for t in &meta.tensors {
        let n: usize = t.shape.iter().product();
        let chunk = payload
            .get(..4 * n)
            .ok_or_else(|| ckpt_err(path, format!("truncated payload in tensor `{}`", t.name)))?;
        let data = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        store.insert(t.name.clone(), Tensor::new(&t.shape, data)?)?;
        store.set_trainable(&t.name, t.trainable)?;
        payload = &payload[4 * n..];
    }
    if !payload.is_empty() {
        return Err(ckpt_err(path, format!("{} trailing bytes", payload.len())));
    }
    Ok((store, meta))
}

/// Copy checkpoint weights into an already-built model; shapes must match.
pub fn load_into(model: &mut Model, path: &Path) -> Result<CheckpointMeta> {
    let (store, meta) = load_checkpoint(path)?;
    model.store.load_values_from(&store)?;
    Ok(meta)
}

/// Rebuild the model described by a checkpoint and load its weights.
pub fn model_from_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    let (store, meta) = load_checkpoint(path)?;
    let mut model = Model::init(meta.spec.clone(), 0)?;
    model.store.load_values_from(&store)?;
    for (name, p) in store.iter() {
        model.store.set_trainable(name, p.trainable)?;
    }
    Ok((model, meta))
}
