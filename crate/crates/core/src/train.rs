//! Minibatch training loop shared by every model.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::nn::{apply_bn_updates, clip_global_norm, AdamW, BnUpdate, Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Cosine-anneal the learning rate from `lr` down to
    /// `lr * final_lr_fraction` over the run; 1 keeps it constant.
    pub final_lr_fraction: f64,
    /// AdamW second-moment decay.
    pub beta2: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 8,
            lr: 1e-4,
            weight_decay: 1e-2,
            clip_norm: Some(1.0),
            seed: 0,
            final_lr_fraction: 1.0,
            beta2: 0.999,
        }
    }
}

impl FitOptions {
    /// Learning rate for optimizer step `step` of `total_steps`.
    pub fn lr_at(&self, step: usize, total_steps: usize) -> f64 {
        let progress = step as f64 / total_steps.max(1) as f64;
        let f = self.final_lr_fraction;
        self.lr * (f + (1.0 - f) * 0.5 * (1.0 + libm::cos(core::f64::consts::PI * progress)))
    }
}

/// What one optimization step reports back to the loop.
pub struct StepOutput {
    pub loss: f64,
    pub grads: Gradients,
    pub bn_updates: Vec<BnUpdate>,
    /// Correct predictions in the batch, for classifiers.
    pub correct: usize,
    /// Number of predictions `correct` is out of (0 when not a classifier).
    pub counted: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EpochStats {
    pub epoch: usize,
    /// Sample-weighted mean training loss.
    pub loss: f64,
    pub accuracy: Option<f64>,
}

/// Runs `opts.epochs` passes over `num_samples` examples in seeded shuffled
/// minibatches. `step` computes loss and gradients for a batch of sample
/// indices against the current parameters; the loop clips, applies AdamW and
/// folds in batch-norm statistics. `on_epoch` sees each epoch's summary.
pub fn fit<F>(
    store: &mut ParamStore,
    num_samples: usize,
    opts: &FitOptions,
    mut on_epoch: impl FnMut(&EpochStats),
    mut step: F,
) -> Result<Vec<EpochStats>>
where
    F: FnMut(&ParamStore, &[usize], &mut ChaCha8Rng) -> Result<StepOutput>,
{
    if num_samples == 0 {
        return Err(CoreError::EmptyDataset);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = AdamW::new(opts.lr, opts.weight_decay);
    opt.beta2 = opts.beta2;
    let mut order: Vec<usize> = (0..num_samples).collect();
    let mut history = Vec::with_capacity(opts.epochs);
    let per_epoch = num_samples.div_ceil(opts.batch_size.max(1));
    let total_steps = per_epoch * opts.epochs;
    let mut step_index = 0usize;
    for epoch in 1..=opts.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut counted) = (0.0, 0, 0);
        for batch in order.chunks(opts.batch_size.max(1)) {
            let mut out = step(store, batch, &mut rng)?;
            if !out.loss.is_finite() {
                return Err(CoreError::InvalidParameter(alloc::format!(
                    "non-finite loss at epoch {epoch}"
                )));
            }
            if let Some(max) = opts.clip_norm {
                clip_global_norm(&mut out.grads, max);
            }
            opt.lr = opts.lr_at(step_index, total_steps);
            step_index += 1;
            opt.step(store, &out.grads);
            apply_bn_updates(store, &out.bn_updates);
            loss_sum += out.loss * batch.len() as f64;
            correct += out.correct;
            counted += out.counted;
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / num_samples as f64,
            accuracy: (counted > 0).then(|| correct as f64 / counted as f64),
        };
        on_epoch(&stats);
        history.push(stats);
    }
    Ok(history)
}

/// Stacks equally shaped sample tensors into one batch tensor with a new
/// leading axis.
pub fn stack(samples: &[&crate::nn::Tensor]) -> Result<crate::nn::Tensor> {
    let first = samples.first().ok_or(CoreError::EmptyDataset)?;
    let mut shape = alloc::vec![samples.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(samples.len() * first.len());
    for s in samples {
        if s.shape() != first.shape() {
            return Err(crate::error::bad_shape!(
                "cannot stack {:?} with {:?}",
                first.shape(),
                s.shape()
            ));
        }
        data.extend_from_slice(s.data());
    }
    crate::nn::Tensor::from_vec(&shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_schedule_runs_from_lr_towards_the_floor() {
        let o = FitOptions { lr: 0.1, final_lr_fraction: 0.05, ..Default::default() };
        assert_eq!(o.lr_at(0, 100), 0.1);
        assert!((o.lr_at(50, 100) - 0.1 * (0.05 + 0.95 * 0.5)).abs() < 1e-15);
        assert!((o.lr_at(100, 100) - 0.005).abs() < 1e-15);
        let lrs: Vec<f64> = (0..=100).map(|i| o.lr_at(i, 100)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn fraction_one_keeps_lr_constant() {
        let o = FitOptions { lr: 3e-3, ..Default::default() };
        assert!((0..=10).all(|i| o.lr_at(i, 10) == 3e-3));
    }
}
