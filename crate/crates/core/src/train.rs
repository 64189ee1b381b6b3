//! Bidirectional teacher-forced training with SGD.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::data::{collate, scale_augment, shuffled_batches, Batch, Sample, Vocab, EOS, SOS_L2R, SOS_R2L};
use crate::decoder::CoverageMode;
use crate::error::{Error, Result};
use crate::metrics::{default_max_len, evaluate, SearchMode};
use crate::model::Model;
use crate::rng::{derive_indexed, rng_for, Rng};
use crate::tensor::{checkpoint, Graph, Precision, Scalar, Sgd, SgdConfig, Tensor};
use rand::SeedableRng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BidirectionalTargets {
    /// `[sos_l2r, tokens.., eos]`
    pub l2r: Vec<usize>,
    /// `[sos_r2l, reversed tokens.., eos]`
    pub r2l: Vec<usize>,
}

pub fn make_targets(tokens: &[usize]) -> Result<BidirectionalTargets> {
    if tokens.is_empty() {
        return Err(Error::Usage("a label needs at least one token".into()));
    }
    if let Some(&bad) = tokens.iter().find(|&&t| Vocab::is_reserved(t)) {
        return Err(Error::Vocab(format!("reserved id {bad} inside a label")));
    }
    let mut l2r = vec![SOS_L2R];
    l2r.extend_from_slice(tokens);
    l2r.push(EOS);
    let mut r2l = vec![SOS_R2L];
    r2l.extend(tokens.iter().rev());
    r2l.push(EOS);
    Ok(BidirectionalTargets { l2r, r2l })
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub coverage: CoverageMode,
    pub precision: Precision,
    pub augment: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    /// Held-out share of the corpus used for validation.
    pub val_fraction: f64,
}

impl TrainConfig {
    pub fn toy() -> Self {
        TrainConfig {
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs: 6,
            batch_size: 8,
            seed: 0,
            coverage: CoverageMode::Fusion,
            precision: Precision::Single,
            augment: true,
            scale_min: 0.7,
            scale_max: 1.4,
            val_fraction: 0.1,
        }
    }

    pub fn paper() -> Self {
        TrainConfig { lr: 0.08, ..TrainConfig::toy() }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { lr: self.lr, momentum: self.momentum, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.momentum) || self.weight_decay < 0.0 {
            return Err(Error::Config("need lr >= 0, momentum in [0, 1) and weight_decay >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max) {
            return Err(Error::Config("scale range must satisfy 0 < min <= max".into()));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must be in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_exprate: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Deterministic `(train, validation)` split.
pub fn split_train_val(samples: &[Sample], fraction: f64, seed: u64) -> (Vec<Sample>, Vec<Sample>) {
    let mut idx: Vec<usize> = (0..samples.len()).collect();
    idx.shuffle(&mut rng_for(seed, "split"));
    let n_val = (samples.len() as f64 * fraction).floor() as usize;
    let val = idx[..n_val].iter().map(|&i| samples[i].clone()).collect();
    let mut train_idx = idx[n_val..].to_vec();
    train_idx.sort_unstable();
    (train_idx.iter().map(|&i| samples[i].clone()).collect(), val)
}

/// One optimizer step on one batch; gradients are reset first.
pub fn train_step<T: Scalar>(model: &mut Model<T>, sgd: &mut Sgd<T>, batch: &Batch, graph_seed: u64) -> Result<f64> {
    model.store.zero_grads();
    let mut g = Graph::new(true, graph_seed);
    let loss = model.batch_loss(&mut g, batch)?;
    let value = g.value(loss)[0].as_f64();
    g.backward(loss)?;
    model.store.accumulate_grads(&g);
    model.store.apply_norm_updates(&g);
    sgd.step(&mut model.store);
    Ok(value)
}

fn augment_batch(samples: &[&Sample], cfg: &TrainConfig, rng: &mut Rng) -> Vec<Sample> {
    samples
        .iter()
        .map(|s| {
            let mut s = (*s).clone();
            if cfg.augment {
                s.image = scale_augment(&s.image, rng, cfg.scale_min, cfg.scale_max);
            }
            s
        })
        .collect()
}

/// Checkpoint entries plus optimizer velocity and progress metadata.
pub fn training_entries<T: Scalar>(model: &Model<T>, sgd: &Sgd<T>, epoch: usize, best_val: f64) -> Vec<(String, Tensor<T>)> {
    let mut entries = model.checkpoint_entries();
    for (id, v) in model.store.ids().zip(sgd.velocity()) {
        let shape = model.store.get(id).shape().to_vec();
        entries.push((format!("velocity.{}", model.store.name(id)), Tensor::new(shape, v.clone()).expect("velocity shape")));
    }
    entries.push(("meta.epoch".into(), Tensor::new(vec![1], vec![T::of(epoch as f64)]).unwrap()));
    entries.push(("meta.best_val".into(), Tensor::new(vec![1], vec![T::of(best_val)]).unwrap()));
    entries
}

/// Restores weights, velocity and progress written by [`training_entries`].
/// Returns `(completed epochs, best validation exprate)`.
pub fn restore_training<T: Scalar>(model: &mut Model<T>, sgd: &mut Sgd<T>, path: &Path) -> Result<(usize, f64)> {
    let entries = checkpoint::load::<T>(path)?;
    model.load_entries(&entries)?;
    let ids: Vec<_> = model.store.ids().collect();
    let mut epoch = None;
    let mut best = 0.0;
    for (name, t) in &entries {
        if let Some(p) = name.strip_prefix("velocity.") {
            let id = model.store.id(p).ok_or_else(|| Error::Checkpoint(format!("velocity for unknown tensor {p:?}")))?;
            let slot = ids.iter().position(|&i| i == id).unwrap();
            if t.numel() != sgd.velocity()[slot].len() {
                return Err(Error::Checkpoint(format!("tensor {name:?}: velocity size mismatch")));
            }
            sgd.velocity_mut()[slot] = t.data().to_vec();
        } else if name == "meta.epoch" {
            epoch = Some(t.data()[0].as_f64() as usize);
        } else if name == "meta.best_val" {
            best = t.data()[0].as_f64();
        }
    }
    let epoch = epoch.ok_or_else(|| Error::Checkpoint("checkpoint has no meta.epoch; it is not a resumable training state".into()))?;
    Ok((epoch, best))
}

/// Exact-match rate of greedy left-to-right decoding.
pub fn greedy_exprate<T: Scalar>(model: &Model<T>, samples: &[Sample], max_len: usize) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    Ok(evaluate(model, samples, 1, max_len, SearchMode::L2R)?.0.exprate)
}

/// Runs epochs `start_epoch+1..=cfg.epochs`. With `out`, appends to
/// `metrics.jsonl` and writes `last.ckpt` every epoch and `best.ckpt`
/// whenever validation exact-match improves.
pub fn train<T: Scalar>(model: &mut Model<T>, sgd: &mut Sgd<T>, samples: &[Sample], cfg: &TrainConfig, out: Option<&Path>, start_epoch: usize, mut best_val: f64) -> Result<TrainReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Usage("no training samples".into()));
    }
    sgd.config = cfg.sgd();
    let (train_set, val_set) = split_train_val(samples, cfg.val_fraction, cfg.seed);
    let max_len = default_max_len(samples);
    let widths: Vec<usize> = train_set.iter().map(|s| s.image.width).collect();
    if let Some(dir) = out {
        fs::create_dir_all(dir)?;
    }
    let mut report = TrainReport { best_val, best_epoch: start_epoch, ..Default::default() };
    for epoch in start_epoch + 1..=cfg.epochs {
        let started = Instant::now();
        let mut rng = Rng::seed_from_u64(derive_indexed(cfg.seed, "epoch", epoch as u64));
        let batches = shuffled_batches(&widths, cfg.batch_size, &mut rng);
        let mut total = 0.0;
        for (bi, idx) in batches.iter().enumerate() {
            let picked: Vec<&Sample> = idx.iter().map(|&i| &train_set[i]).collect();
            let augmented = augment_batch(&picked, cfg, &mut rng);
            let batch = collate(&augmented.iter().collect::<Vec<_>>())?;
            let graph_seed = derive_indexed(cfg.seed, &format!("graph{epoch}"), bi as u64);
            let loss = match train_step(model, sgd, &batch, graph_seed) {
                Ok(l) if l.is_finite() => l,
                Ok(_) | Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged(format!("non-finite loss at epoch {epoch}, batch {bi} (sample ids {:?}), lr {}", batch.ids, cfg.lr)))
                }
                Err(e) => return Err(e),
            };
            total += loss;
            report.step_losses.push(loss);
        }
        let train_loss = total / batches.len() as f64;
        let val_exprate = greedy_exprate(model, &val_set, max_len)?;
        let record = EpochRecord { epoch, train_loss, val_exprate, seconds: started.elapsed().as_secs_f64() };
        let improved = report.epochs.is_empty() && start_epoch == 0 || val_exprate > best_val;
        if improved {
            best_val = val_exprate;
            report.best_val = val_exprate;
            report.best_epoch = epoch;
        }
        if let Some(dir) = out {
            let mut log = OpenOptions::new().create(true).append(true).open(dir.join("metrics.jsonl"))?;
            writeln!(log, "{}", serde_json::to_string(&record)?)?;
            checkpoint::save(&dir.join("last.ckpt"), &training_entries(model, sgd, epoch, best_val))?;
            if improved {
                model.save(&dir.join("best.ckpt"))?;
            }
        }
        report.epochs.push(record);
    }
    Ok(report)
}
