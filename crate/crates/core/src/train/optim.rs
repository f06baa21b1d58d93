use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{params, ParamSet};
use crate::tensor::{Prng, Tensor, DEFAULT_SEED};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizerConfig {
    pub peak_lr: f64,
    pub initial_lr: f64,
    pub warmup_epochs: f64,
    /// Total decay applied across the post-warmup span.
    pub decay_factor: f64,
    pub epochs: usize,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub flip_prob: f64,
    /// Sampling weight of samples whose interactions change, relative to 1.
    pub oversample: f64,
    pub seed: u64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            peak_lr: 1e-4,
            initial_lr: 1e-8,
            warmup_epochs: 3.0,
            decay_factor: 0.1,
            epochs: 40,
            weight_decay: 1e-2,
            batch_size: 16,
            flip_prob: 0.5,
            oversample: 3.0,
            seed: DEFAULT_SEED,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.warmup_epochs >= 0.0 && self.warmup_epochs < self.epochs as f64) {
            return Err(Error::config(format!(
                "warmup ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        if !(self.peak_lr >= 0.0 && self.initial_lr >= 0.0 && self.decay_factor > 0.0) {
            return Err(Error::config("learning rates must be non-negative and the decay positive"));
        }
        if self.batch_size == 0 || !(0.0..=1.0).contains(&self.flip_prob) || !(self.oversample > 0.0) {
            return Err(Error::config("batch_size ≥ 1, flip_prob in [0, 1] and oversample > 0 required"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        Ok(())
    }
}

/// Learning rate at fractional `epoch ∈ [0, epochs)`: a linear ramp from
/// `initial_lr` to `peak_lr`, then smooth exponential decay that reaches
/// `peak_lr · decay_factor` at the end of training.
pub fn lr_at(epoch: f64, cfg: &OptimizerConfig) -> Result<f64> {
    let total = cfg.epochs as f64;
    if !(epoch >= 0.0 && epoch < total) {
        return Err(Error::contract(format!("epoch {epoch} outside [0, {total})")));
    }
    let w = cfg.warmup_epochs;
    if epoch < w {
        return Ok(cfg.initial_lr + (cfg.peak_lr - cfg.initial_lr) * epoch / w);
    }
    Ok(cfg.peak_lr * cfg.decay_factor.powf((epoch - w) / (total - w)))
}

/// First and second moment estimates per parameter.
#[derive(Clone, Debug, Default)]
pub struct AdamState {
    pub step: u64,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One AdamW update of every parameter that has a gradient. The frozen
/// Fourier frequencies are never touched.
pub fn adamw_step(
    params: &mut ParamSet,
    grads: &BTreeMap<String, Tensor<f32>>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    for (name, g) in grads {
        if !g.all_finite() {
            return Err(Error::Numeric(format!("non-finite gradient for {name}")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - ADAM_BETA1.powi(t), 1.0 - ADAM_BETA2.powi(t));
    for (name, g) in grads {
        if params::is_frozen(name) {
            continue;
        }
        let p = params
            .get_mut(name)
            .ok_or_else(|| Error::Lookup(format!("gradient for unknown parameter {name}")))?;
        if p.shape() != g.shape() {
            return Err(Error::shape(format!(
                "gradient {:?} for parameter {name} of shape {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let m = state.m.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let v = state.v.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
        let mut data = p.to_vec();
        for (i, (w, &gi)) in data.iter_mut().zip(g.data()).enumerate() {
            let gi = gi as f64;
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * gi;
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * gi * gi;
            let (mh, vh) = (m[i] / c1, v[i] / c2);
            let wf = *w as f64;
            *w = (wf - lr * weight_decay * wf - lr * mh / (vh.sqrt() + ADAM_EPS)) as f32;
        }
        *p = Tensor::new(p.shape().to_vec(), data)?;
    }
    Ok(())
}

/// Weighted draw with replacement of `n` sample indices, each paired with a
/// flip decision.
pub fn sample_indices(weights: &[f64], n: usize, flip_prob: f64, rng: &mut Prng) -> Result<Vec<(usize, bool)>> {
    use rand::distr::{weighted::WeightedIndex, Distribution};
    let dist = WeightedIndex::new(weights).map_err(|e| Error::contract(format!("cannot sample: {e}")))?;
    Ok((0..n)
        .map(|_| {
            let i = dist.sample(rng.rng());
            (i, rng.bernoulli(flip_prob))
        })
        .collect())
}
