//! Adam optimisation with validation-based early stopping.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::SampleWindow;
use crate::error::{Error, Result};
use crate::metrics::{masked_mae_loss, MetricAccumulator, MetricReport};
use crate::model::FmpestfModel;
use crate::params::ParamStore;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a strict validation improvement before stopping.
    pub patience: usize,
    pub mask_threshold: f64,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 16,
            max_epochs: 300,
            patience: 20,
            mask_threshold: 0.0,
            seed: 0,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return Err(Error::Config(format!("learning rate {} is invalid", self.lr)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config(
                "batch_size, max_epochs and patience must be positive".into(),
            ));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::Config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        if !(self.mask_threshold.is_finite() && self.mask_threshold >= 0.0) {
            return Err(Error::Config("mask_threshold must be a nonnegative number".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config(format!("clip_norm {c} must be positive")));
            }
        }
        Ok(())
    }
}

/// Adaptive moment estimation with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.iter().map(|(_, p)| Tensor::zeros(p.value.shape())).collect();
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for (k, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            let (m, v) = (self.m[k].data_mut(), self.v[k].data_mut());
            for (i, (w, &g)) in p.value.data_mut().iter_mut().zip(p.grad.data()).enumerate() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let update = lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                if update != 0.0 {
                    *w -= update;
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mae: f64,
    pub best: bool,
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_loss={} val_mae={} best={}",
            self.epoch, self.train_loss, self.val_mae, self.best
        )
    }
}

impl EpochLog {
    /// Parses a line produced by `Display`.
    pub fn parse(line: &str) -> Option<Self> {
        let mut fields = line.split_whitespace().map(|kv| kv.split_once('='));
        let mut next = |key: &str| match fields.next()? {
            Some((k, v)) if k == key => Some(v.to_string()),
            _ => None,
        };
        Some(Self {
            epoch: next("epoch")?.parse().ok()?,
            train_loss: next("train_loss")?.parse().ok()?,
            val_mae: next("val_mae")?.parse().ok()?,
            best: next("best")?.parse().ok()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_val_mae: f64,
    pub log: Vec<EpochLog>,
}

fn with_context(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite { stage } => Error::NonFinite {
            stage: format!("{stage} at epoch {epoch} batch {batch}"),
        },
        other => other,
    }
}

/// Loss and per-parameter gradients for one window.
pub fn sample_gradients(
    model: &FmpestfModel,
    window: &SampleWindow,
    prompt: Option<&Tensor>,
    threshold: f64,
) -> Result<(f64, Vec<Option<Tensor>>)> {
    let mut tape = Tape::new();
    let y = model.forward(&mut tape, &window.history, &window.time_index, prompt)?;
    let loss = masked_mae_loss(&mut tape, y, &window.target, threshold)?;
    let grads = tape.backward(loss)?.param_grads(model.store.len());
    Ok((tape.value(loss).data()[0], grads))
}

/// Raw-unit forecasts for every window, in window order.
pub fn predict_windows(
    model: &FmpestfModel,
    windows: &[SampleWindow],
    prompt: Option<&Tensor>,
) -> Result<Vec<Tensor>> {
    windows
        .par_iter()
        .map(|w| model.predict(&w.history, &w.time_index, prompt))
        .collect()
}

/// Metrics of `model` over `windows` in raw units.
pub fn evaluate(
    model: &FmpestfModel,
    windows: &[SampleWindow],
    prompt: Option<&Tensor>,
    threshold: f64,
) -> Result<MetricReport> {
    if windows.is_empty() {
        return Err(Error::contract("cannot evaluate an empty split"));
    }
    let preds = predict_windows(model, windows, prompt)?;
    let mut acc = MetricAccumulator::new(model.cfg().horizon, threshold);
    for (p, w) in preds.iter().zip(windows) {
        acc.push(p, &w.target)?;
    }
    Ok(acc.finish())
}

fn clip(store: &mut ParamStore, max_norm: f64) {
    let norm = store
        .iter()
        .flat_map(|(_, p)| p.grad.data().iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            store.get_mut(id).grad.data_mut().iter_mut().for_each(|g| *g *= s);
        }
    }
}

/// Trains `model` in place and leaves it holding the best-validation parameters.
/// `on_epoch` sees every log record as soon as the epoch finishes.
pub fn train(
    model: &mut FmpestfModel,
    train: &[SampleWindow],
    val: &[SampleWindow],
    prompt: Option<&Tensor>,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::contract("training needs nonempty train and validation splits"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut adam = Adam::new(&model.store);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stale = 0;
    let mut log = Vec::new();

    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let results: Vec<_> = batch
                .par_iter()
                .map(|&i| sample_gradients(model, &train[i], prompt, cfg.mask_threshold))
                .collect();
            model.store.zero_grad();
            let scale = 1.0 / batch.len() as f64;
            for r in results {
                let (loss, grads) = r.map_err(|e| with_context(e, epoch, b))?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite {
                        stage: format!("training loss at epoch {epoch} batch {b}"),
                    });
                }
                loss_sum += loss;
                model.store.accumulate(&grads)?;
            }
            let ids: Vec<_> = model.store.iter().map(|(id, _)| id).collect();
            for id in ids {
                model.store.get_mut(id).grad.data_mut().iter_mut().for_each(|g| *g *= scale);
            }
            if let Some(c) = cfg.clip_norm {
                clip(&mut model.store, c);
            }
            adam.step(&mut model.store, cfg.lr);
        }
        let train_loss = loss_sum / train.len() as f64;
        let val_mae = evaluate(model, val, prompt, cfg.mask_threshold)?.mae;
        let improved = best.as_ref().map_or(true, |(_, b, _)| val_mae < *b);
        if improved {
            best = Some((epoch, val_mae, model.store.clone()));
            stale = 0;
        } else {
            stale += 1;
        }
        let rec = EpochLog {
            epoch,
            train_loss,
            val_mae,
            best: improved,
        };
        on_epoch(&rec);
        log.push(rec);
        if stale >= cfg.patience {
            break;
        }
    }
    let (best_epoch, best_val_mae, store) = best.expect("at least one epoch ran");
    model.store = store;
    Ok(TrainOutcome {
        best_epoch,
        best_val_mae,
        log,
    })
}
