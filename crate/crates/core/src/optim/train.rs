use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::adamw::{AdamW, AdamWConfig};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::binarize;
use crate::model::SmaAtUNet;
use crate::nn::{loss, LossKind, Mode};
use crate::scalar::Scalar;
use crate::tensor::{bilinear_resize, bilinear_resize_backward, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    pub shuffle: bool,
    pub loss: LossKind,
    /// Rain rate (mm/h) at or above which a target pixel counts as an event for the bce loss.
    pub rain_threshold: f64,
    /// Share of training samples held out for validation when no val split exists.
    pub val_fraction: f64,
    pub optimizer: AdamWConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 10,
            patience: 3,
            min_delta: 0.0,
            seed: 0,
            shuffle: true,
            loss: LossKind::BceLogits,
            rain_threshold: 0.2,
            val_fraction: 0.1,
            optimizer: AdamWConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::config("batch_size, max_epochs and patience must be >= 1"));
        }
        if !(self.min_delta >= 0.0) || !(self.rain_threshold >= 0.0) {
            return Err(Error::config("min_delta and rain_threshold must be >= 0"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::config("val_fraction must lie in (0, 1)"));
        }
        self.optimizer.validate()
    }
}

/// Loss of raw logits against rain-rate targets, with the gradient w.r.t.
/// the logits. Logits are bilinearly resized to the target grid first; bce
/// targets are binarized at `rain_threshold`.
pub fn batch_loss<T: Scalar>(logits: &Tensor<T>, target: &Tensor<T>, config: &TrainConfig) -> Result<(f64, Tensor<T>)> {
    let [n, c, h, w] = logits.dims();
    let [tn, tc, th, tw] = target.dims();
    if (n, c) != (tn, tc) {
        return Err(Error::shape(format!(
            "logits {:?} and targets {:?} disagree on batch/frames",
            logits.dims(),
            target.dims()
        )));
    }
    let resized = (h, w) != (th, tw);
    let pred = if resized { bilinear_resize(logits, th, tw)? } else { logits.clone() };
    let (value, grad) = match config.loss {
        LossKind::BceLogits => loss(&pred, &binarize(target, T::lit(config.rain_threshold)), config.loss)?,
        LossKind::Mse => loss(&pred, target, config.loss)?,
    };
    let grad = if resized { bilinear_resize_backward(logits.dims(), &grad)? } else { grad };
    Ok((value.to_f64_lossless(), grad))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EpochStats {
    /// Mean batch loss weighted by batch size.
    pub train_loss: f64,
    pub batches: usize,
    pub samples: usize,
}

/// Shuffle seed for one epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (epoch as u64).wrapping_add(1).wrapping_mul(0xD1B5_4A32_D192_ED03)
}

pub fn train_epoch<T: Scalar>(
    model: &mut SmaAtUNet<T>,
    data: &Dataset<T>,
    config: &TrainConfig,
    opt: &mut AdamW<T>,
    epoch: usize,
) -> Result<EpochStats> {
    if data.is_empty() {
        return Err(Error::config("cannot train on an empty split"));
    }
    let order = crate::data::batch_order(data.len(), config.batch_size, epoch_seed(config.seed, epoch), config.shuffle)?;
    let mut weighted = 0f64;
    for idx in &order {
        let batch = data.batch(idx)?;
        let logits = model.forward(&batch.input, Mode::Train)?;
        let (value, grad) = batch_loss(&logits, &batch.target, config)?;
        let grads = model.backward(&grad)?;
        opt.step(model.params_mut(), &grads)?;
        weighted += value * idx.len() as f64;
    }
    Ok(EpochStats {
        train_loss: weighted / data.len() as f64,
        batches: order.len(),
        samples: data.len(),
    })
}

/// Eval-mode loss over a split, weighted by batch size.
pub fn evaluate_loss<T: Scalar>(model: &SmaAtUNet<T>, data: &Dataset<T>, config: &TrainConfig) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::config("cannot evaluate loss on an empty split"));
    }
    let mut weighted = 0f64;
    for idx in crate::data::batch_order(data.len(), config.batch_size, 0, false)? {
        let batch = data.batch(&idx)?;
        let logits = model.infer(&batch.input)?;
        weighted += batch_loss(&logits, &batch.target, config)?.0 * idx.len() as f64;
    }
    Ok(weighted / data.len() as f64)
}

/// Patience-based stopping on a monitored loss.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    pub best: f64,
    pub best_epoch: Option<usize>,
    wait: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopping {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: None,
            wait: 0,
        }
    }

    /// An epoch improves when its loss beats the best so far by more than `min_delta`.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.wait = 0;
            StopDecision {
                improved: true,
                stop: false,
            }
        } else {
            self.wait += 1;
            StopDecision {
                improved: false,
                stop: self.wait >= self.patience,
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct FitResult<T> {
    /// Snapshot from the epoch with the lowest validation loss.
    pub model: SmaAtUNet<T>,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Trains until `max_epochs` or early stopping; epochs are numbered from 1.
pub fn fit<T: Scalar>(
    mut model: SmaAtUNet<T>,
    train: &Dataset<T>,
    val: &Dataset<T>,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<FitResult<T>> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::config("fit needs non-empty train and val splits"));
    }
    let mut opt = AdamW::new(config.optimizer.clone(), model.params())?;
    let mut stopper = EarlyStopping::new(config.patience, config.min_delta);
    let mut history = Vec::new();
    let mut best: Option<SmaAtUNet<T>> = None;
    let mut stopped_early = false;
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let stats = train_epoch(&mut model, train, config, &mut opt, epoch)?;
        let val_loss = evaluate_loss(&model, val, config)?;
        let record = EpochRecord {
            epoch,
            train_loss: stats.train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
            lr: config.optimizer.lr,
        };
        log::info!(
            "epoch {epoch}: train_loss {:.6} val_loss {:.6} ({:.1}s)",
            record.train_loss,
            record.val_loss,
            record.seconds
        );
        on_epoch(&record);
        history.push(record);
        let decision = stopper.observe(epoch, val_loss);
        if decision.improved {
            let mut snap = model.clone();
            snap.clear_cache();
            best = Some(snap);
        }
        if decision.stop && epoch < config.max_epochs {
            stopped_early = true;
            break;
        }
    }
    let best_epoch = stopper.best_epoch.ok_or_else(|| Error::Data("validation loss was never finite".into()))?;
    Ok(FitResult {
        model: best.expect("best snapshot recorded with best_epoch"),
        history,
        best_epoch,
        best_val_loss: stopper.best,
        stopped_early,
    })
}

/// Writes one JSON object per epoch.
pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in history {
        serde_json::to_writer(&mut buf, r)?;
        buf.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    crate::model::write_atomic(path, &buf)
}
