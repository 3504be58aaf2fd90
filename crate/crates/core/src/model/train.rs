use std::path::Path;
use std::time::Instant;

use bifuser_tensor::{apply_bn_updates, Adam, CosineAnnealing, Graph, Scalar};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{Checkpoint, RngState};
use super::{loss, BiFuser, ModelError, ModelResult, Normalization};
use crate::error::NetError;
use crate::imaging::{augment, AugmentParams, CanonicalSample};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Stops early once this many optimizer steps have run; the schedule
    /// anneals over the capped length.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub augment: AugmentParams,
    /// Validate every this many epochs (the last epoch always validates).
    pub validate_every: usize,
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::paper()
    }
}

impl TrainConfig {
    pub fn paper() -> Self {
        Self {
            lr0: 1e-3,
            lr_min: 1e-9,
            epochs: 300,
            batch_size: 2,
            max_steps: None,
            seed: 0,
            augment: AugmentParams::default(),
            validate_every: 1,
            threshold: super::DEFAULT_THRESHOLD,
        }
    }

    pub fn tisu() -> Self {
        Self { lr0: 6e-5, ..Self::paper() }
    }

    /// Overfits eight samples within 500 steps.
    pub fn smoke() -> Self {
        Self { epochs: 125, max_steps: Some(500), augment: AugmentParams::none(), validate_every: 25, ..Self::paper() }
    }

    pub fn validate(&self) -> ModelResult<()> {
        if !(self.lr0 > self.lr_min && self.lr_min > 0.0) {
            return Err(NetError::InvalidConfig(format!("learning rates need lr0 > lr_min > 0, got {} and {}", self.lr0, self.lr_min)).into());
        }
        if self.batch_size == 0 || self.epochs == 0 || self.validate_every == 0 {
            return Err(NetError::InvalidConfig("batch size, epochs and validation interval must be positive".into()).into());
        }
        Ok(())
    }

    pub fn total_steps(&self, n_samples: usize) -> usize {
        let full = self.epochs * n_samples.div_ceil(self.batch_size);
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn schedule(&self, n_samples: usize) -> CosineAnnealing {
        CosineAnnealing { lr_max: self.lr0, lr_min: self.lr_min, total_steps: self.total_steps(n_samples) }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Mean fovea distance on the validation set, original-resolution pixels.
    pub val_error_px: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step.
    pub losses: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_error_px: Option<f64>,
}

/// Mean localization error over `samples` in original-resolution pixels.
pub fn mean_error<T: Scalar>(model: &BiFuser<T>, samples: &[CanonicalSample], batch_size: usize, threshold: f64) -> ModelResult<f64> {
    let mut total = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&CanonicalSample> = chunk.iter().collect();
        for (r, s) in model.predict(&refs, threshold)?.iter().zip(chunk) {
            total += r.original.distance(s.annotation.fovea);
        }
    }
    Ok(total / samples.len().max(1) as f64)
}

/// Trains `model` on `train`, keeping the weights with the lowest validation
/// error (or the final weights when `val` is empty). The best state is also
/// written to `checkpoint` when given. Fundus normalization statistics are
/// taken from `train`.
pub fn fit<T: Scalar>(
    model: &mut BiFuser<T>,
    train: &[CanonicalSample],
    val: &[CanonicalSample],
    tc: &TrainConfig,
    checkpoint: Option<&Path>,
) -> ModelResult<TrainReport> {
    tc.validate()?;
    if train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    model.normalization = Normalization::from_samples(train);
    let schedule = tc.schedule(train.len());
    let total = schedule.total_steps;
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut adam = Adam::new(model.store.len());
    let mut report = TrainReport { epochs: Vec::new(), losses: Vec::with_capacity(total), best_epoch: 0, best_val_error_px: None };
    let mut best_store = None;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    log::info!("training {} parameters on {} samples for {total} steps", model.num_parameters(), train.len());

    for epoch in 0..tc.epochs {
        if step >= total {
            break;
        }
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_steps = 0;
        let mut lr = schedule.lr(step);
        for chunk in order.chunks(tc.batch_size) {
            if step >= total {
                break;
            }
            let samples: Vec<CanonicalSample> = chunk.iter().map(|&i| augment(&train[i], &mut rng, &tc.augment)).collect();
            let refs: Vec<&CanonicalSample> = samples.iter().collect();
            let batch = model.batch(&refs)?;
            let (value, grads, bn) = {
                let mut g = Graph::train(&model.store);
                let out = model.forward_batch(&mut g, &batch)?;
                let l = loss(&mut g, out.logits, batch.mask.clone())?;
                let value = g.value(l).data()[0].to_f64_lossy();
                if !value.is_finite() {
                    return Err(ModelError::Diverged { step });
                }
                let grads = g.tape.backward(l)?;
                (value, grads, g.take_bn_updates())
            };
            if !grads.all_finite() {
                return Err(ModelError::Diverged { step });
            }
            lr = schedule.lr(step);
            adam.step(&mut model.store, &grads, lr)?;
            apply_bn_updates(&mut model.store, &bn);
            report.losses.push(value);
            epoch_loss += value;
            epoch_steps += 1;
            step += 1;
        }

        let last = epoch + 1 == tc.epochs || step >= total;
        let val_error = if !val.is_empty() && ((epoch + 1) % tc.validate_every == 0 || last) {
            Some(mean_error(model, val, tc.batch_size, tc.threshold)?)
        } else {
            None
        };
        let record = EpochRecord {
            epoch,
            steps: step,
            lr,
            train_loss: epoch_loss / epoch_steps.max(1) as f64,
            val_error_px: val_error,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!("epoch {epoch}: loss {:.5} lr {:.3e} val {}", record.train_loss, lr, val_error.map_or("-".to_string(), |e| format!("{e:.3}px")));
        report.epochs.push(record);

        let improved = match (val_error, report.best_val_error_px) {
            (Some(e), Some(b)) => e < b,
            (Some(_), None) => true,
            (None, _) => val.is_empty(),
        };
        if improved {
            report.best_epoch = epoch;
            if val_error.is_some() {
                report.best_val_error_px = val_error;
            }
            best_store = Some(model.store.clone());
            if let Some(path) = checkpoint {
                let rng_state = RngState::of(&rng);
                Checkpoint::save(path, model, Some(&adam), epoch, step as u64, rng_state, Some(tc))?;
            }
        }
    }
    if let Some(store) = best_store {
        model.store = store;
    }
    Ok(report)
}
