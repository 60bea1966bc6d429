use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sample_loss, ModifierParams, Sample, TrainConfig};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean loss over the epoch's batches, measured before each update.
    pub train_loss: f64,
    pub val_loss: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Training-set loss of the initial parameters.
    pub initial_loss: f64,
    pub epochs: Vec<EpochStats>,
    /// Loss of the returned parameters on each split.
    pub final_train_loss: f64,
    pub final_val_loss: f64,
    pub best_val_loss: f64,
    pub steps: usize,
    pub stopped_early: bool,
    pub wall_time_secs: f64,
}

/// Linear warmup, then cosine decay to `min_lr_ratio * lr` at `total` steps.
pub fn learning_rate(cfg: &TrainConfig, step: usize, total: usize) -> f64 {
    let peak = cfg.learning_rate;
    if step < cfg.warmup_steps {
        return peak * (step + 1) as f64 / cfg.warmup_steps as f64;
    }
    let span = total.saturating_sub(cfg.warmup_steps).max(1);
    let progress = ((step - cfg.warmup_steps) as f64 / span as f64).min(1.0);
    let floor = cfg.min_lr_ratio * peak;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    decay_mask: Vec<bool>,
    t: i32,
}

impl AdamW {
    fn new(params: &ModifierParams) -> Self {
        let mut decay_mask = vec![false; params.len()];
        for t in params.tensors() {
            if t.is_matrix() {
                decay_mask[t.offset..t.offset + t.len()].fill(true);
            }
        }
        Self {
            m: vec![0.0; params.len()],
            v: vec![0.0; params.len()],
            decay_mask,
            t: 0,
        }
    }

    fn step(&mut self, cfg: &TrainConfig, lr: f64, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t);
        let bc2 = 1.0 - cfg.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = cfg.beta1 * self.m[i] + (1.0 - cfg.beta1) * g;
            self.v[i] = cfg.beta2 * self.v[i] + (1.0 - cfg.beta2) * g * g;
            if self.decay_mask[i] {
                params[i] -= lr * cfg.weight_decay * params[i];
            }
            params[i] -= lr * (self.m[i] / bc1) / ((self.v[i] / bc2).sqrt() + cfg.epsilon);
        }
    }
}

pub fn mean_loss(params: &ModifierParams, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("samples"));
    }
    let mut total = 0.0;
    for s in samples {
        total += sample_loss(params, s, None)?;
    }
    Ok(total / samples.len() as f64)
}

/// AdamW with warmup plus cosine decay and patience-based early stopping on
/// the validation loss. With no validation samples the training set is used.
/// Runs single-threaded in a fixed order, so results are bit-reproducible.
pub fn train(mut params: ModifierParams, train_set: &[Sample], val_set: &[Sample]) -> Result<(ModifierParams, TrainReport)> {
    let started = Instant::now();
    let cfg = params.config.train.clone();
    params.config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training samples"));
    }
    let val_set = if val_set.is_empty() { train_set } else { val_set };
    let batch = cfg.batch_size.min(train_set.len());
    let per_epoch = train_set.len().div_ceil(batch);
    let total = per_epoch * cfg.max_epochs;
    let mut opt = AdamW::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(params.config.seed ^ 0x7472_6169_6e00_0000);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let initial_loss = mean_loss(&params, train_set)?;
    let mut epochs = Vec::new();
    let mut best = f64::INFINITY;
    let mut since_best = 0;
    let mut step = 0;
    let mut stopped_early = false;
    let mut grad = vec![0.0; params.len()];

    for epoch in 0..cfg.max_epochs {
        if batch < train_set.len() {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        let mut lr = 0.0;
        for chunk in order.chunks(batch) {
            grad.fill(0.0);
            let mut batch_loss = 0.0;
            for &i in chunk {
                batch_loss += sample_loss(&params, &train_set[i], Some(&mut grad))?;
            }
            let inv = 1.0 / chunk.len() as f64;
            grad.iter_mut().for_each(|g| *g *= inv);
            if cfg.grad_clip > 0.0 {
                let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > cfg.grad_clip {
                    let s = cfg.grad_clip / norm;
                    grad.iter_mut().for_each(|g| *g *= s);
                }
            }
            lr = learning_rate(&cfg, step, total);
            opt.step(&cfg, lr, &mut params.data, &grad);
            step += 1;
            epoch_loss += batch_loss * inv;
        }
        if !params.is_finite() {
            return Err(Error::NonFinite(format!("parameters after epoch {epoch}")));
        }
        let val_loss = mean_loss(&params, val_set)?;
        epochs.push(EpochStats {
            epoch,
            train_loss: epoch_loss / per_epoch as f64,
            val_loss,
            learning_rate: lr,
        });
        if val_loss < best - cfg.min_delta {
            best = val_loss;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    let final_train_loss = mean_loss(&params, train_set)?;
    let final_val_loss = mean_loss(&params, val_set)?;
    let report = TrainReport {
        initial_loss,
        epochs,
        final_train_loss,
        final_val_loss,
        best_val_loss: best.min(final_val_loss),
        steps: step,
        stopped_early,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((params, report))
}
