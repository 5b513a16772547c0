//! The training recipe: Adam with decoupled weight decay, validation-loss
//! plateau scheduling, early stopping, the epoch loop, and split evaluation.

pub mod mae;

use std::collections::HashMap;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::data::{batch_plan, stack_batch, FloodSample};
use crate::error::{Error, Result};
use crate::metrics::{
    combined_loss, compute_metrics, threshold_logits, ConfusionCounts, LossConfig, MetricsReport,
};
use crate::model::SegModel;
use crate::params::{ParamId, ParamStore};
use crate::rng::{stream, stream_rng};
use crate::tensor::Tensor;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Optimization hyperparameters and recipe settings.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Early stopping on validation loss: stop after this many epochs
    /// without a new best.
    pub early_stop_patience: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Plateau scheduler decay factor.
    pub sched_factor: f64,
    /// Plateau scheduler patience in epochs.
    pub sched_patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_epochs: 50,
            early_stop_patience: 2,
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            sched_factor: 0.5,
            sched_patience: 3,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("max_epochs and batch_size must be positive".into()));
        }
        if self.early_stop_patience == 0 || self.sched_patience == 0 {
            return Err(Error::Config("patiences must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.sched_factor) || self.sched_factor == 0.0 {
            return Err(Error::Config(format!(
                "sched_factor must be in (0,1), got {}",
                self.sched_factor
            )));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

/// Adam with bias correction and decoupled weight decay. Covers exactly the
/// parameters that were trainable when it was created.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step_count: u64,
    param_ids: Vec<ParamId>,
    moments: HashMap<ParamId, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let param_ids = store.trainable_ids();
        let moments = param_ids
            .iter()
            .map(|&id| {
                let n = store.get(id).numel();
                (id, (vec![0.0; n], vec![0.0; n]))
            })
            .collect();
        Adam {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step_count: 0,
            param_ids,
            moments,
        }
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn set_lr(&mut self, lr: f64) {
        self.lr = lr;
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    /// One update; consumes the `grad` buffers of the covered parameters.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count;
        let bias1 = 1.0 - self.beta1.powi(t as i32);
        let bias2 = 1.0 - self.beta2.powi(t as i32);
        for &id in &self.param_ids {
            let name = store.name(id).to_string();
            let param = store.get_mut(id);
            let grad = param.grad.take().ok_or_else(|| {
                Error::Consistency(format!("missing gradient on trainable leaf {name}"))
            })?;
            let (m, v) = self.moments.get_mut(&id).expect("moment buffers exist");
            let data = param.data_mut();
            for i in 0..data.len() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                let m_hat = m[i] / bias1;
                let v_hat = v[i] / bias2;
                data[i] -= self.lr * (m_hat / (v_hat.sqrt() + self.eps))
                    + self.lr * self.weight_decay * data[i];
            }
        }
        Ok(())
    }
}

/// Reduce-on-plateau: halve (by `factor`) once the monitored loss fails to
/// improve on the running best for more than `patience` epochs.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    factor: f64,
    patience: usize,
    min_delta: f64,
    best: Option<f64>,
    counter: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            factor,
            patience,
            min_delta: 0.0,
            best: None,
            counter: 0,
        }
    }

    /// Feed one epoch's validation loss; returns the (possibly decayed) lr.
    pub fn step(&mut self, val_loss: f64, lr: f64) -> f64 {
        match self.best {
            None => {
                self.best = Some(val_loss);
                lr
            }
            Some(best) if val_loss < best - self.min_delta => {
                self.best = Some(val_loss);
                self.counter = 0;
                lr
            }
            _ => {
                self.counter += 1;
                if self.counter > self.patience {
                    self.counter = 0;
                    lr * self.factor
                } else {
                    lr
                }
            }
        }
    }
}

/// True once the last `patience` epochs brought no improvement over the
/// running best.
pub fn early_stop(val_loss_history: &[f64], patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut best_idx = 0;
    for (i, &v) in val_loss_history.iter().enumerate() {
        if v < best {
            best = v;
            best_idx = i;
        }
    }
    !val_loss_history.is_empty() && val_loss_history.len() - 1 - best_idx >= patience
}

/// One epoch's outcome. `wall_secs` is informational and deliberately kept
/// out of the CSV log so reruns are byte-identical.
#[derive(Debug, Clone)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub val_metrics: MetricsReport,
    pub wall_secs: f64,
}

impl EpochRecord {
    pub const CSV_HEADER: &'static str =
        "epoch,train_loss,val_loss,lr,val_accuracy,val_precision,val_recall,val_f1,val_iou,val_dice";

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch,
            self.train_loss,
            self.val_loss,
            self.lr,
            self.val_metrics.to_csv_row()
        )
    }
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub best_model: SegModel,
    pub records: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub final_lr: f64,
}

/// Distinct, deterministic shuffle seed per epoch.
fn epoch_shuffle_seed(seed: u64, epoch: usize) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(epoch as u64)
}

/// Loss and metrics over a split in eval mode (stable order, batched).
pub fn eval_split(
    model: &SegModel,
    samples: &[FloodSample],
    batch_size: usize,
    loss_cfg: &LossConfig,
) -> Result<(f64, MetricsReport, Vec<(String, MetricsReport)>)> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot evaluate an empty split".into()));
    }
    let plan = batch_plan(samples.len(), batch_size, None)?;
    let run_batch = |idxs: &Vec<usize>| -> Result<(f64, usize, Vec<(String, MetricsReport)>)> {
        let refs: Vec<&FloodSample> = idxs.iter().map(|&i| &samples[i]).collect();
        let batch = stack_batch(&refs)?;
        let mut rng = stream_rng(0, stream::DROPOUT); // unused in eval mode
        let mut tape = Tape::new();
        let pre = tape.constant(batch.pre.clone());
        let post = tape.constant(batch.post.clone());
        let logits = model.forward(&mut tape, pre, post, false, &mut rng)?;
        let loss = combined_loss(&mut tape, logits, &batch.target, loss_cfg)?;
        let loss_val = tape.value(loss).item();

        let logits_t = tape.value(logits);
        let per_pixel = logits_t.numel() / refs.len();
        let mut per_sample = Vec::with_capacity(refs.len());
        for (i, s) in refs.iter().enumerate() {
            let slice = Tensor::new(
                vec![per_pixel],
                logits_t.data()[i * per_pixel..(i + 1) * per_pixel].to_vec(),
            )?;
            let pred = threshold_logits(&slice);
            let gt = s.mask.reshaped(vec![per_pixel])?;
            per_sample.push((s.id.clone(), compute_metrics(&pred, &gt)?));
        }
        Ok((loss_val, refs.len(), per_sample))
    };

    #[cfg(feature = "parallel")]
    let batch_results: Vec<_> = plan.par_iter().map(run_batch).collect::<Result<_>>()?;
    #[cfg(not(feature = "parallel"))]
    let batch_results: Vec<_> = plan.iter().map(run_batch).collect::<Result<_>>()?;

    let mut loss_sum = 0.0;
    let mut n = 0usize;
    let mut counts = ConfusionCounts::default();
    let mut per_sample = Vec::with_capacity(samples.len());
    for (loss, b, reports) in batch_results {
        loss_sum += loss * b as f64;
        n += b;
        for (id, r) in reports {
            counts.add(&r.counts);
            per_sample.push((id, r));
        }
    }
    Ok((
        loss_sum / n as f64,
        MetricsReport::from_counts(counts),
        per_sample,
    ))
}

/// Aggregate + per-sample metrics of a model over a split (eval mode,
/// threshold 0.5).
pub fn evaluate(
    model: &SegModel,
    samples: &[FloodSample],
) -> Result<(MetricsReport, Vec<(String, MetricsReport)>)> {
    let (_, aggregate, per_sample) =
        eval_split(model, samples, 8, &LossConfig::default())?;
    Ok((aggregate, per_sample))
}

/// The full recipe: seeded shuffling, combined BCE+Dice loss, Adam,
/// per-epoch validation, plateau scheduling, early stopping, best-epoch
/// checkpointing. Deterministic for a fixed seed.
pub fn train(
    model: &mut SegModel,
    train_samples: &[FloodSample],
    val_samples: &[FloodSample],
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train_samples.is_empty() || val_samples.is_empty() {
        return Err(Error::Usage("train and val splits must be non-empty".into()));
    }

    let mut optimizer = Adam::new(&model.params, cfg);
    let mut scheduler = PlateauScheduler::new(cfg.sched_factor, cfg.sched_patience);
    let mut dropout_rng = stream_rng(cfg.seed, stream::DROPOUT);
    let mut records = Vec::new();
    let mut val_history = Vec::new();
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let t0 = Instant::now();
        let plan = batch_plan(
            train_samples.len(),
            cfg.batch_size,
            Some(epoch_shuffle_seed(cfg.seed, epoch)),
        )?;
        let mut loss_sum = 0.0;
        for (batch_idx, idxs) in plan.iter().enumerate() {
            let refs: Vec<&FloodSample> = idxs.iter().map(|&i| &train_samples[i]).collect();
            let batch = stack_batch(&refs)?;
            let mut tape = Tape::new();
            let pre = tape.constant(batch.pre);
            let post = tape.constant(batch.post);
            let logits = model.forward(&mut tape, pre, post, true, &mut dropout_rng)?;
            let loss = combined_loss(&mut tape, logits, &batch.target, loss_cfg)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::NonFiniteLoss {
                    loss: loss_val,
                    epoch,
                    batch: batch_idx,
                    lr: optimizer.lr(),
                });
            }
            tape.backward(loss)?;
            tape.write_param_grads(&mut model.params);
            drop(tape); // release buffer handles before the in-place update
            optimizer.step(&mut model.params)?;
            loss_sum += loss_val * refs.len() as f64;
        }
        let train_loss = loss_sum / train_samples.len() as f64;

        let (val_loss, val_metrics, _) =
            eval_split(model, val_samples, cfg.batch_size, loss_cfg)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                loss: val_loss,
                epoch,
                batch: usize::MAX,
                lr: optimizer.lr(),
            });
        }
        val_history.push(val_loss);
        let new_lr = scheduler.step(val_loss, optimizer.lr());
        optimizer.set_lr(new_lr);

        if best.as_ref().is_none_or(|(_, b, _)| val_loss < *b) {
            best = Some((epoch, val_loss, model.params.clone()));
        }
        records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: new_lr,
            val_metrics,
            wall_secs: t0.elapsed().as_secs_f64(),
        });
        if early_stop(&val_history, cfg.early_stop_patience) {
            stopped_early = true;
            break;
        }
    }

    let (best_epoch, best_val_loss, best_params) = best.expect("at least one epoch ran");
    let mut best_model = model.clone();
    best_model.params = best_params;
    best_model.params.clear_grads();
    Ok(TrainOutcome {
        best_model,
        records,
        best_epoch,
        best_val_loss,
        stopped_early,
        final_lr: optimizer.lr(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_first_step_is_signed_lr() {
        let cfg = TrainConfig {
            lr: 0.01,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(1.0).with_requires_grad(true));
        let mut adam = Adam::new(&store, &cfg);
        store.get_mut(id).grad = Some(vec![0.37]);
        adam.step(&mut store).unwrap();
        let w = store.get(id).item();
        // m̂/√v̂ = g/|g| up to adam_eps → update ≈ −lr·sign(g).
        assert!((w - (1.0 - 0.01)).abs() < 1e-6, "w = {w}");

        store.get_mut(id).grad = Some(vec![0.0]);
        // Second step with zero grad still moves (momentum), so reset state
        // to verify the zero-gradient identity from scratch.
        let mut store2 = ParamStore::new();
        let id2 = store2.insert("w", Tensor::scalar(2.0).with_requires_grad(true));
        let mut adam2 = Adam::new(&store2, &cfg);
        store2.get_mut(id2).grad = Some(vec![0.0]);
        adam2.step(&mut store2).unwrap();
        assert_eq!(store2.get(id2).item(), 2.0);
    }

    #[test]
    fn adam_missing_gradient_is_a_consistency_error() {
        let cfg = TrainConfig::default();
        let mut store = ParamStore::new();
        store.insert("w", Tensor::scalar(1.0).with_requires_grad(true));
        let mut adam = Adam::new(&store, &cfg);
        let err = adam.step(&mut store).unwrap_err();
        assert!(matches!(err, Error::Consistency(_)));
        assert!(err.to_string().contains('w'));
    }

    #[test]
    fn adam_decoupled_weight_decay_shrinks_without_gradient_signal() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut store = ParamStore::new();
        let id = store.insert("w", Tensor::scalar(1.0).with_requires_grad(true));
        let mut adam = Adam::new(&store, &cfg);
        store.get_mut(id).grad = Some(vec![0.0]);
        adam.step(&mut store).unwrap();
        // Pure decay: w ← w − lr·wd·w = 1 − 0.05.
        assert!((store.get(id).item() - 0.95).abs() < 1e-12);
    }

    #[test]
    fn scheduler_keeps_lr_while_improving() {
        let mut s = PlateauScheduler::new(0.5, 3);
        let mut lr = 1e-4;
        for v in [1.0, 0.9, 0.8] {
            lr = s.step(v, lr);
        }
        assert_eq!(lr, 1e-4);
    }

    #[test]
    fn scheduler_halves_after_patience_exhaustion() {
        // Five identical losses: first sets the best; halving happens on the
        // 4th non-improving epoch (counter 4 > patience 3).
        let mut s = PlateauScheduler::new(0.5, 3);
        let mut lr = 1e-4;
        let mut when = Vec::new();
        for (i, v) in [1.0, 1.0, 1.0, 1.0, 1.0].into_iter().enumerate() {
            let next = s.step(v, lr);
            if next != lr {
                when.push(i + 1);
            }
            lr = next;
        }
        assert_eq!(when, vec![5], "halve exactly at epoch 5");
        assert_eq!(lr, 0.5e-4);
    }

    #[test]
    fn scheduler_compounds_over_two_plateaus() {
        let mut s = PlateauScheduler::new(0.5, 3);
        let mut lr = 1e-4;
        for v in [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0] {
            lr = s.step(v, lr);
        }
        assert_eq!(lr, 0.25e-4);
    }

    #[test]
    fn early_stop_trace_semantics() {
        assert!(early_stop(&[1.0, 0.9, 0.95, 0.96], 2));
        assert!(!early_stop(&[1.0, 0.9, 0.8, 0.7], 2));
        assert!(!early_stop(&[1.0], 2));
        assert!(!early_stop(&[1.0, 0.9, 0.95], 2));
        assert!(early_stop(&[1.0, 0.9, 0.95, 0.85, 0.9, 0.95], 2));
    }

    #[test]
    fn epoch_csv_excludes_wall_time() {
        let record = EpochRecord {
            epoch: 3,
            train_loss: 0.5,
            val_loss: 0.25,
            lr: 1e-4,
            val_metrics: MetricsReport::from_counts(ConfusionCounts {
                true_pos: 1,
                false_pos: 0,
                false_neg: 0,
                true_neg: 3,
            }),
            wall_secs: 123.456,
        };
        let row = record.to_csv_row();
        assert_eq!(row, "3,0.5,0.25,0.0001,100.00,100.00,100.00,100.00,100.00,100.00");
        assert!(!row.contains("123"));
    }
}
