//! Training loop, history log and checkpoints.
//!
//! Each optimizer step draws `batch_size` problems from seeded epoch
//! shuffles, unrolls every problem at its true length, averages binary
//! cross-entropy over all adjacencies in the batch and applies one Adam
//! update at the scheduled learning rate. Batch sampling and dropout masks
//! are pure functions of `(seed, step, problem id)`, so a run resumed from a
//! checkpoint follows the uninterrupted trajectory bit for bit.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{ChangeLabels, Dataset};
use crate::error::{Error, Result};
use crate::eval;
use crate::featurize::{fnv1a64, FeatureConfig, Featurizer, SentenceMatrix};
use crate::model::{self, init_model, ModelConfig, ModelParams};
use crate::numerics::{adam_step, masked_bce_with_logits, AdamConfig, AdamState, CosineSchedule, Mode, Tensor2};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub seed: u64,
    /// Validate after every `val_every` completed steps (0 disables).
    pub val_every: u64,
    /// Record the training loss every `log_every` steps.
    pub log_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 4,
            total_steps: 30000,
            warmup_steps: 2600,
            peak_lr: 5e-4,
            min_lr: 5e-5,
            seed: 0,
            val_every: 1000,
            log_every: 10,
            checkpoint_dir: None,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            peak: self.peak_lr,
            min: self.min_lr,
            warmup: self.warmup_steps,
            total: self.total_steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be at least 1".into()));
        }
        if self.log_every == 0 {
            return Err(Error::InvalidArgument("log_every must be at least 1".into()));
        }
        if let Some(clip) = self.grad_clip {
            if !(clip > 0.0) {
                return Err(Error::InvalidArgument(format!("gradient clip {clip} must be positive")));
            }
        }
        self.schedule().validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub val_macro_f1: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<HistoryRecord>,
}

impl TrainHistory {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(|e| Error::Data(format!("history line: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(TrainHistory { records })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestVal {
    pub step: u64,
    pub macro_f1: f64,
}

/// Seeds for the sampler and dropout streams. Both are derived per step, so
/// this plus the step counter is the complete generator state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub scheme: String,
}

const RNG_SCHEME: &str = "chacha8/splitmix64(seed,epoch|step,problem,occurrence)";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub feature_config: FeatureConfig,
    pub train_config: TrainConfig,
    pub adam: AdamState,
    pub rng: RngState,
    /// Number of completed optimizer steps.
    pub step: u64,
    pub best: Option<BestVal>,
}

impl Checkpoint {
    /// Errors unless the stored architecture equals `expected`.
    pub fn ensure_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let have = &self.params.config;
        let arch = |c: &ModelConfig| (c.input_dim, c.hidden_dim, c.bilstm_layers, c.mlp_hidden_dims);
        if arch(have) != arch(expected) {
            return Err(Error::Shape(format!(
                "checkpoint architecture (input {}, hidden {}, layers {}, mlp {:?}) does not match \
                 (input {}, hidden {}, layers {}, mlp {:?})",
                have.input_dim,
                have.hidden_dim,
                have.bilstm_layers,
                have.mlp_hidden_dims,
                expected.input_dim,
                expected.hidden_dim,
                expected.bilstm_layers,
                expected.mlp_hidden_dims
            )));
        }
        Ok(())
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SSPCCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const CRC64: crc::Crc<u64> = crc::Crc::<u64>::new(&crc::CRC_64_ECMA_182);

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    model_config: ModelConfig,
    feature_config: FeatureConfig,
    train_config: TrainConfig,
    adam_config: AdamConfig,
    adam_t: u64,
    rng: RngState,
    step: u64,
    best: Option<BestVal>,
}

fn push_tensor(out: &mut Vec<u8>, name: &str, rows: usize, cols: usize, values: &[f64]) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(rows as u32).to_le_bytes());
    out.extend_from_slice(&(cols as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn checkpoint_to_bytes(ckpt: &Checkpoint) -> Vec<u8> {
    let meta = CheckpointMeta {
        model_config: ckpt.params.config.clone(),
        feature_config: ckpt.feature_config.clone(),
        train_config: ckpt.train_config.clone(),
        adam_config: ckpt.adam.config,
        adam_t: ckpt.adam.t,
        rng: ckpt.rng.clone(),
        step: ckpt.step,
        best: ckpt.best,
    };
    let meta = serde_json::to_vec(&meta).expect("checkpoint metadata serializes");
    let named = ckpt.params.named_tensors();

    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    out.extend_from_slice(&((3 * named.len()) as u32).to_le_bytes());
    for (name, t) in &named {
        push_tensor(&mut out, &format!("param.{name}"), t.rows(), t.cols(), t.as_slice());
    }
    for (k, (name, t)) in named.iter().enumerate() {
        push_tensor(&mut out, &format!("adam.m.{name}"), t.rows(), t.cols(), &ckpt.adam.m[k]);
        push_tensor(&mut out, &format!("adam.v.{name}"), t.rows(), t.cols(), &ckpt.adam.v[k]);
    }
    let crc = CRC64.checksum(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < CHECKPOINT_MAGIC.len() + 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let (body, trailer) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(trailer.try_into().expect("8 bytes"));
    if CRC64.checksum(body) != stored {
        return Err(Error::Checkpoint("checksum mismatch (file corrupt or truncated)".into()));
    }
    let mut cur = Cursor { bytes: body, pos: 8 };
    let version = cur.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version mismatch: file has {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let meta_len = cur.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
    meta.model_config.validate()?;

    let mut tensors = std::collections::HashMap::new();
    let count = cur.u32()?;
    for _ in 0..count {
        let name_len = cur.u16()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = cur.u32()? as usize;
        let cols = cur.u32()? as usize;
        let raw = cur.take(rows * cols * 8)?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        tensors.insert(name, Tensor2::from_vec(rows, cols, values)?);
    }
    if cur.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }

    let mut params = ModelParams::zeros(&meta.model_config);
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let mut take = |key: String, shape: (usize, usize)| -> Result<Tensor2> {
        let t = tensors
            .remove(&key)
            .ok_or_else(|| Error::Shape(format!("checkpoint lacks tensor {key}")))?;
        if t.shape() != shape {
            return Err(Error::Shape(format!(
                "tensor {key} has shape {:?}, config implies {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    let mut adam = AdamState::new(&params.tensor_sizes());
    adam.config = meta.adam_config;
    adam.t = meta.adam_t;
    for (k, (name, slot)) in names.iter().zip(params.tensors_mut()).enumerate() {
        let shape = slot.shape();
        *slot = take(format!("param.{name}"), shape)?;
        adam.m[k] = take(format!("adam.m.{name}"), shape)?.into_vec();
        adam.v[k] = take(format!("adam.v.{name}"), shape)?.into_vec();
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Shape(format!("unexpected tensor {extra} in checkpoint")));
    }
    Ok(Checkpoint {
        params,
        feature_config: meta.feature_config,
        train_config: meta.train_config,
        adam,
        rng: meta.rng,
        step: meta.step,
        best: meta.best,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, checkpoint_to_bytes(ckpt)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5353_5043_u64, |acc, &p| splitmix64(acc ^ p))
}

/// One labeled training example, featurized once up front.
#[derive(Debug, Clone)]
pub struct Example {
    pub features: SentenceMatrix,
    pub labels: ChangeLabels,
}

fn featurize_labeled(featurizer: &Featurizer, dataset: &Dataset) -> Result<Vec<Example>> {
    let truths = dataset.truths()?;
    let feats = featurizer.featurize_dataset(dataset)?;
    Ok(feats
        .into_iter()
        .zip(truths)
        .map(|(features, labels)| Example {
            features,
            labels: labels.clone(),
        })
        .collect())
}

/// Mean BCE over every adjacency of `examples`, eval mode.
pub fn dataset_loss(params: &ModelParams, examples: &[Example]) -> Result<f64> {
    let per: Vec<(f64, usize)> = examples
        .par_iter()
        .filter(|e| !e.labels.is_empty())
        .map(|e| {
            let z = model::logits(params, &e.features)?.logits;
            let mask = vec![1u8; z.len()];
            let (loss, _) = masked_bce_with_logits(&z, e.labels.as_slice(), &mask)?;
            Ok((loss * z.len() as f64, z.len()))
        })
        .collect::<Result<_>>()?;
    let count: usize = per.iter().map(|p| p.1).sum();
    if count == 0 {
        return Err(Error::Data("no adjacencies to score".into()));
    }
    Ok(per.iter().map(|p| p.0).sum::<f64>() / count as f64)
}

/// Resumable training state.
pub struct Trainer {
    params: ModelParams,
    adam: AdamState,
    train_cfg: TrainConfig,
    schedule: CosineSchedule,
    feature_config: FeatureConfig,
    train: Vec<Example>,
    val: Option<(Dataset, Vec<Example>)>,
    step: u64,
    best: Option<BestVal>,
    history: TrainHistory,
    epoch_cache: Option<(u64, Vec<usize>)>,
}

/// Per-step outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

impl Trainer {
    pub fn new(
        model_cfg: &ModelConfig,
        train_cfg: &TrainConfig,
        train_set: &Dataset,
        val_set: Option<&Dataset>,
        featurizer: &Featurizer,
    ) -> Result<Self> {
        let params = init_model(model_cfg)?;
        Self::build(params, None, train_cfg, train_set, val_set, featurizer, 0, None)
    }

    pub fn from_checkpoint(
        ckpt: Checkpoint,
        train_set: &Dataset,
        val_set: Option<&Dataset>,
        featurizer: &Featurizer,
    ) -> Result<Self> {
        if featurizer.config != ckpt.feature_config {
            return Err(Error::Checkpoint(
                "feature configuration differs from the one the checkpoint was trained with".into(),
            ));
        }
        Self::build(
            ckpt.params,
            Some(ckpt.adam),
            &ckpt.train_config,
            train_set,
            val_set,
            featurizer,
            ckpt.step,
            ckpt.best,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        params: ModelParams,
        adam: Option<AdamState>,
        train_cfg: &TrainConfig,
        train_set: &Dataset,
        val_set: Option<&Dataset>,
        featurizer: &Featurizer,
        step: u64,
        best: Option<BestVal>,
    ) -> Result<Self> {
        train_cfg.validate()?;
        if featurizer.config.dim != params.config.input_dim {
            return Err(Error::Shape(format!(
                "feature dim {} differs from model input dim {}",
                featurizer.config.dim, params.config.input_dim
            )));
        }
        if train_set.is_empty() {
            return Err(Error::Data("training set is empty".into()));
        }
        let train: Vec<Example> = featurize_labeled(featurizer, train_set)?
            .into_iter()
            .filter(|e| !e.labels.is_empty())
            .collect();
        if train.is_empty() {
            return Err(Error::Data("training set has no adjacencies to learn from".into()));
        }
        let val = match val_set {
            Some(v) if !v.is_empty() => Some((v.clone(), featurize_labeled(featurizer, v)?)),
            _ => None,
        };
        if let Some(dir) = &train_cfg.checkpoint_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            let probe = dir.join(".write-test");
            fs::write(&probe, b"").map_err(|e| Error::io(&probe, e))?;
            let _ = fs::remove_file(&probe);
        }
        let adam = adam.unwrap_or_else(|| AdamState::new(&params.tensor_sizes()));
        if adam.sizes() != params.tensor_sizes() {
            return Err(Error::Shape("optimizer state does not match parameters".into()));
        }
        Ok(Trainer {
            params,
            adam,
            schedule: train_cfg.schedule(),
            train_cfg: train_cfg.clone(),
            feature_config: featurizer.config.clone(),
            train,
            val,
            step,
            best,
            history: TrainHistory::default(),
            epoch_cache: None,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn history(&self) -> &TrainHistory {
        &self.history
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn best(&self) -> Option<BestVal> {
        self.best
    }

    pub fn training_examples(&self) -> &[Example] {
        &self.train
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.train_cfg.total_steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.params.clone(),
            feature_config: self.feature_config.clone(),
            train_config: self.train_cfg.clone(),
            adam: self.adam.clone(),
            rng: RngState {
                seed: self.train_cfg.seed,
                scheme: RNG_SCHEME.into(),
            },
            step: self.step,
            best: self.best,
        }
    }

    fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        if self.epoch_cache.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.train.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[self.train_cfg.seed, 1, epoch]));
            order.shuffle(&mut rng);
            self.epoch_cache = Some((epoch, order));
        }
        &self.epoch_cache.as_ref().expect("filled above").1
    }

    /// Training-set indices of the batch at `step`, sorted by problem id.
    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let n = self.train.len() as u64;
        let bs = self.train_cfg.batch_size as u64;
        let mut batch: Vec<usize> = (0..bs)
            .map(|j| {
                let pos = step * bs + j;
                self.epoch_order(pos / n)[(pos % n) as usize]
            })
            .collect();
        batch.sort_by(|&a, &b| self.train[a].features.problem_id.cmp(&self.train[b].features.problem_id));
        batch
    }

    /// Loss and summed gradient of one batch (in the given order) at the
    /// current parameters.
    pub fn batch_gradient(&self, step: u64, batch: &[usize]) -> Result<(f64, ModelParams)> {
        let seed = self.train_cfg.seed;
        let keyed: Vec<(usize, u64)> = batch
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let occurrence = batch[..k].iter().filter(|&&j| j == i).count() as u64;
                (i, occurrence)
            })
            .collect();
        let passes = keyed
            .par_iter()
            .map(|&(i, occurrence)| {
                let ex = &self.train[i];
                let id_hash = fnv1a64(ex.features.problem_id.as_bytes(), 0);
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, 2, step, id_hash, occurrence]));
                model::forward(&self.params, &ex.features, Mode::Train, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;

        let mut logits = Vec::new();
        let mut targets = Vec::new();
        for ((out, _), &(i, _)) in passes.iter().zip(&keyed) {
            logits.extend_from_slice(&out.logits);
            targets.extend_from_slice(self.train[i].labels.as_slice());
        }
        let mask = vec![1u8; logits.len()];
        let (loss, grad) = masked_bce_with_logits(&logits, &targets, &mask)?;

        let mut offsets = Vec::with_capacity(passes.len());
        let mut offset = 0;
        for (out, _) in &passes {
            offsets.push(offset);
            offset += out.logits.len();
        }
        let grads = passes
            .par_iter()
            .zip(offsets)
            .map(|((out, cache), off)| {
                model::backward(&self.params, cache, &grad[off..off + out.logits.len()])
            })
            .collect::<Result<Vec<_>>>()?;
        let mut total = self.params.zeros_like();
        for g in &grads {
            total.add_assign(&g.params);
        }
        Ok((loss, total))
    }

    /// Runs one optimizer step.
    pub fn train_step(&mut self) -> Result<StepReport> {
        if self.is_done() {
            return Err(Error::InvalidArgument("training already finished".into()));
        }
        let step = self.step;
        let lr = self.schedule.lr_at(step)?;
        let batch = self.batch_indices(step);
        let (loss, mut grads) = self.batch_gradient(step, &batch)?;
        if let Some(clip) = self.train_cfg.grad_clip {
            let norm = grads.global_norm();
            if norm > clip {
                for t in grads.tensors_mut() {
                    t.scale(clip / norm);
                }
            }
        }
        let grad_views: Vec<&[f64]> = grads.named_tensors().into_iter().map(|(_, t)| t.as_slice()).collect();
        let mut param_views: Vec<&mut [f64]> = self.params.tensors_mut().into_iter().map(|t| t.as_mut_slice()).collect();
        adam_step(&mut param_views, &grad_views, &mut self.adam, lr)?;
        self.step += 1;

        let mut val_macro_f1 = None;
        let ve = self.train_cfg.val_every;
        if self.val.is_some() && ve > 0 && (self.step.is_multiple_of(ve) || self.is_done()) {
            let f1 = self.validate()?;
            val_macro_f1 = Some(f1);
            if self.best.is_none_or(|b| f1 > b.macro_f1) {
                self.best = Some(BestVal {
                    step: self.step,
                    macro_f1: f1,
                });
                if let Some(dir) = &self.train_cfg.checkpoint_dir {
                    save_checkpoint(&self.checkpoint(), &dir.join("best.ckpt"))?;
                }
            }
        }
        if step.is_multiple_of(self.train_cfg.log_every) || val_macro_f1.is_some() {
            self.history.records.push(HistoryRecord {
                step,
                lr,
                train_loss: loss,
                val_macro_f1,
            });
        }
        Ok(StepReport { step, lr, loss })
    }

    /// Pooled macro-F1 on the validation set with the current parameters.
    pub fn validate(&self) -> Result<f64> {
        let (_, examples) = self
            .val
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("no validation set".into()))?;
        let preds = examples
            .par_iter()
            .map(|e| model::predict(&self.params, &e.features))
            .collect::<Result<Vec<_>>>()?;
        let truths: Vec<&ChangeLabels> = examples.iter().map(|e| &e.labels).collect();
        Ok(eval::macro_f1(&preds, &truths)?.macro_f1)
    }

    /// Runs until `total_steps`, then writes `final.ckpt` and `history.jsonl`
    /// when a checkpoint directory is configured.
    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.train_step()?;
        }
        if let Some(dir) = &self.train_cfg.checkpoint_dir {
            save_checkpoint(&self.checkpoint(), &dir.join("final.ckpt"))?;
            let path = dir.join("history.jsonl");
            let mut f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
            f.write_all(self.history.to_jsonl().as_bytes())
                .map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }

    pub fn into_outcome(self) -> TrainOutcome {
        TrainOutcome {
            params: self.params,
            history: self.history,
            best: self.best,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: TrainHistory,
    pub best: Option<BestVal>,
}

/// Trains a fresh model for `train_cfg.total_steps` optimizer steps.
pub fn train(
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    featurizer: &Featurizer,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model_cfg, train_cfg, train_set, val_set, featurizer)?;
    trainer.run()?;
    Ok(trainer.into_outcome())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{generate, SyntheticConfig};

    fn tiny_model(input_dim: usize) -> ModelConfig {
        ModelConfig {
            input_dim,
            hidden_dim: 4,
            bilstm_layers: 2,
            bilstm_dropout: 0.2,
            mlp_hidden_dims: [8, 4],
            mlp_dropout: 0.2,
            seed: 3,
        }
    }

    fn tiny_train(steps: u64) -> TrainConfig {
        TrainConfig {
            total_steps: steps,
            warmup_steps: 2,
            peak_lr: 1e-2,
            min_lr: 1e-3,
            seed: 11,
            val_every: 5,
            log_every: 1,
            ..TrainConfig::default()
        }
    }

    fn setup() -> (Dataset, Featurizer) {
        let ds = generate(&SyntheticConfig {
            n_problems: 8,
            seed: 5,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let featurizer = Featurizer::new(
            FeatureConfig {
                dim: 16,
                ..FeatureConfig::default()
            },
            None,
        )
        .unwrap();
        (ds, featurizer)
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let (ds, f) = setup();
        let cfg = TrainConfig {
            total_steps: 0,
            warmup_steps: 0,
            ..tiny_train(0)
        };
        let out = train(&tiny_model(16), &cfg, &ds, None, &f).unwrap();
        assert_eq!(out.params, init_model(&tiny_model(16)).unwrap());
        assert!(out.history.records.is_empty());
    }

    #[test]
    fn history_follows_schedule() {
        let (ds, f) = setup();
        let cfg = tiny_train(12);
        let out = train(&tiny_model(16), &cfg, &ds, Some(&ds), &f).unwrap();
        assert_eq!(out.history.records.len(), 12);
        for r in &out.history.records {
            assert_eq!(r.lr, cfg.schedule().lr_at(r.step).unwrap());
        }
        assert!(out.history.records.windows(2).all(|w| w[0].step < w[1].step));
        let vals: Vec<u64> = out.history.records.iter().filter(|r| r.val_macro_f1.is_some()).map(|r| r.step).collect();
        assert_eq!(vals, vec![4, 9, 11]);
        let back = TrainHistory::from_jsonl(&out.history.to_jsonl()).unwrap();
        assert_eq!(back, out.history);
    }

    #[test]
    fn batch_gradient_is_order_invariant() {
        let (ds, f) = setup();
        let mut t = Trainer::new(&tiny_model(16), &tiny_train(10), &ds, None, &f).unwrap();
        let batch = t.batch_indices(3);
        let mut reversed = batch.clone();
        reversed.reverse();
        let (loss_a, g_a) = t.batch_gradient(3, &batch).unwrap();
        let (loss_b, g_b) = t.batch_gradient(3, &reversed).unwrap();
        assert!((loss_a - loss_b).abs() < 1e-12);
        let diff = g_a.flatten().iter().zip(g_b.flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12, "{diff}");
        // with the batch sorted by id, the reduction is bitwise reproducible
        let mut shuffled = batch.clone();
        shuffled.rotate_left(1);
        shuffled.sort_by(|&a, &b| t.train[a].features.problem_id.cmp(&t.train[b].features.problem_id));
        assert_eq!(t.batch_gradient(3, &shuffled).unwrap().1, g_a);
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let (ds, f) = setup();
        let mut a = Trainer::new(&tiny_model(16), &tiny_train(10), &ds, Some(&ds), &f).unwrap();
        for _ in 0..6 {
            a.train_step().unwrap();
        }
        let bytes = checkpoint_to_bytes(&a.checkpoint());
        let mut b = Trainer::from_checkpoint(checkpoint_from_bytes(&bytes).unwrap(), &ds, Some(&ds), &f).unwrap();
        let ra = a.train_step().unwrap();
        let rb = b.train_step().unwrap();
        assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        while !a.is_done() {
            a.train_step().unwrap();
            b.train_step().unwrap();
        }
        assert_eq!(a.params().checksum(), b.params().checksum());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let (ds, f) = setup();
        let mut t = Trainer::new(&tiny_model(16), &tiny_train(4), &ds, None, &f).unwrap();
        t.train_step().unwrap();
        let ckpt = t.checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.ckpt");
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);

        let bytes = fs::read(&path).unwrap();
        let err = checkpoint_from_bytes(&bytes[..bytes.len() - 17]).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
        let mut flipped = bytes.clone();
        flipped[100] ^= 1;
        assert!(checkpoint_from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));
        assert!(checkpoint_from_bytes(b"garbage!garbage!").is_err());

        let mut other = tiny_model(16);
        other.hidden_dim = 2;
        assert!(matches!(ckpt.ensure_compatible(&other), Err(Error::Shape(_))));
        assert!(ckpt.ensure_compatible(&tiny_model(16)).is_ok());
    }

    #[test]
    fn rejects_bad_setup() {
        let (ds, f) = setup();
        let empty = Dataset::new("e", vec![]).unwrap();
        assert!(Trainer::new(&tiny_model(16), &tiny_train(4), &empty, None, &f).is_err());
        assert!(matches!(
            Trainer::new(&tiny_model(8), &tiny_train(4), &ds, None, &f),
            Err(Error::Shape(_))
        ));
        let mut unlabeled = ds.clone();
        unlabeled.items[0].labels = None;
        assert!(Trainer::new(&tiny_model(16), &tiny_train(4), &unlabeled, None, &f).is_err());
        let cfg = TrainConfig {
            checkpoint_dir: Some(PathBuf::from("/proc/sspc-not-writable")),
            ..tiny_train(4)
        };
        assert!(Trainer::new(&tiny_model(16), &cfg, &ds, None, &f).is_err());
    }
}
