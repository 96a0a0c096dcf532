//! AdamW optimization with linear warmup and cosine annealing.

mod run;
mod setup;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

pub use run::{train, StepRecord, TrainData, TrainOptions, TrainOutcome};
pub use setup::{DataConfig, RunConfig, SyntheticData};

use crate::data::AugmentConfig;
use crate::error::{ensure, Error, Result};
use crate::flownet::{Gradients, ModelWeights, OptimizerState};
use crate::losses::{scaled_teacher_cutoff, DEFAULT_LAMBDA};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub total_epochs: u64,
    pub batch_size: usize,
    pub peak_lr: f64,
    pub final_lr: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub lambda: f64,
    /// Exclusive epoch bound for the teacher term; derived from `total_epochs` when unset.
    pub teacher_cutoff_epochs: Option<u64>,
    /// Batches per epoch; defaults to one pass over the larger data source.
    pub steps_per_epoch: Option<u64>,
    pub checkpoint_every: u64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            total_epochs: 300,
            batch_size: 16,
            peak_lr: 3e-4,
            final_lr: 3e-6,
            warmup_steps: 2000,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            clip_norm: Some(1.0),
            lambda: DEFAULT_LAMBDA,
            teacher_cutoff_epochs: None,
            steps_per_epoch: None,
            checkpoint_every: 1,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.final_lr > 0.0 && self.final_lr <= self.peak_lr) {
            return bad("need 0 < final_lr <= peak_lr");
        }
        if self.warmup_steps < 1 {
            return bad("warmup_steps must be at least 1");
        }
        if self.batch_size < 1 {
            return bad("batch_size must be at least 1");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("betas must lie in [0, 1)");
        }
        if self.weight_decay < 0.0 || self.epsilon <= 0.0 || self.lambda < 0.0 {
            return bad("weight_decay and lambda must be non-negative, epsilon positive");
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return bad("clip_norm must be positive");
        }
        if self.checkpoint_every < 1 || self.steps_per_epoch == Some(0) {
            return bad("checkpoint_every and steps_per_epoch must be positive");
        }
        Ok(())
    }

    pub fn teacher_cutoff(&self) -> u64 {
        self.teacher_cutoff_epochs.unwrap_or_else(|| scaled_teacher_cutoff(self.total_epochs))
    }
}

/// Learning rate for `step` of a run whose last step is `max_steps`.
///
/// Linear warmup `peak·(step+1)/warmup` for `step < warmup`, then cosine
/// decay from `peak` at `step = warmup` to `final` at `step = max_steps`.
pub fn lr_at_step(step: u64, config: &TrainConfig, max_steps: u64) -> Result<f64> {
    ensure!(step <= max_steps, "step {step} beyond the final step {max_steps}");
    ensure!(config.warmup_steps >= 1, "warmup_steps must be at least 1");
    let (peak, fin, warm) = (config.peak_lr, config.final_lr, config.warmup_steps);
    if step < warm {
        return Ok(peak * (step + 1) as f64 / warm as f64);
    }
    if max_steps <= warm {
        return Ok(fin);
    }
    let progress = (step - warm) as f64 / (max_steps - warm) as f64;
    // w·peak + (1−w)·final hits both endpoints exactly
    let w = 0.5 * (1.0 + (PI * progress).cos());
    Ok(w * peak + (1.0 - w) * fin)
}

/// One AdamW update of a flat parameter array. `step` is 1-based.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update<T: Real>(
    param: &mut [T],
    grad: &[T],
    m: &mut [T],
    v: &mut [T],
    step: u64,
    lr: f64,
    config: &TrainConfig,
) {
    let (b1, b2) = (T::of(config.beta1), T::of(config.beta2));
    let c1 = T::of(1.0 / (1.0 - config.beta1.powf(step as f64)));
    let c2 = T::of(1.0 / (1.0 - config.beta2.powf(step as f64)));
    let (lr, wd, eps) = (T::of(lr), T::of(config.weight_decay), T::of(config.epsilon));
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = b1 * m[i] + (T::one() - b1) * g;
        v[i] = b2 * v[i] + (T::one() - b2) * g * g;
        let mh = m[i] * c1;
        let vh = v[i] * c2;
        param[i] -= lr * (mh / (vh.sqrt() + eps) + wd * param[i]);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// Gradients were not finite; weights and moments are untouched.
    Skipped,
}

/// Applies AdamW to every parameter array. Non-finite gradients skip the
/// update and increment `state.skipped`.
pub fn optimizer_step(
    weights: &mut ModelWeights<f32>,
    grads: &Gradients<f32>,
    state: &mut OptimizerState,
    lr: f64,
    config: &TrainConfig,
) -> Result<StepOutcome> {
    ensure!(
        state.first_moment.len() == weights.params().count() && grads.arrays().count() == state.first_moment.len(),
        "optimizer state does not match the model"
    );
    if !grads.is_finite() {
        state.skipped += 1;
        log::warn!("non-finite gradients at optimizer step {}; update skipped", state.step + 1);
        return Ok(StepOutcome::Skipped);
    }
    state.step += 1;
    for (((p, g), m), v) in weights
        .params_mut()
        .zip(grads.arrays())
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        ensure!(p.data.len() == g.len() && g.len() == m.len(), "shape mismatch for {}", p.name);
        adamw_update(&mut p.data, g, m, v, state.step, lr, config);
    }
    Ok(StepOutcome::Applied)
}

/// Rescales `grads` so their global norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_global_norm<T: Real>(grads: &mut Gradients<T>, max_norm: f64) -> f64 {
    let norm = grads.global_norm().as_f64();
    if norm.is_finite() && norm > max_norm {
        grads.scale(T::of(max_norm / norm));
    }
    norm
}
