use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Probabilities are clamped to `[PROB_CLAMP, 1 − PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Focusing exponent.
    pub gamma: f64,
    /// Class-balance factor.
    pub beta: f64,
    /// Positive count per class in the training split.
    pub class_counts: Vec<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            beta: 0.9999,
            class_counts: Vec::new(),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) || !(self.gamma >= 0.0) {
            return Err(Error::config(format!(
                "loss needs 0 ≤ beta < 1 and gamma ≥ 0, got beta {} gamma {}",
                self.beta, self.gamma
            )));
        }
        Ok(())
    }

    /// `(1 − β) / (1 − β^n)` per class; 1 for empty classes or β = 0.
    pub fn class_weights(&self, num_classes: usize) -> Result<Vec<f64>> {
        self.validate()?;
        if self.class_counts.len() != num_classes {
            return Err(Error::config(format!(
                "{} class counts for {num_classes} classes",
                self.class_counts.len()
            )));
        }
        Ok(self
            .class_counts
            .iter()
            .map(|&n| class_weight(self.beta, n))
            .collect())
    }
}

pub fn class_weight(beta: f64, n: usize) -> f64 {
    if n == 0 || beta == 0.0 {
        1.0
    } else {
        (1.0 - beta) / (1.0 - beta.powf(n as f64))
    }
}

/// Class-balanced binary focal loss, summed over classes and averaged over
/// the rows of `probs`.
pub fn class_balanced_focal_loss(probs: &[Vec<f64>], targets: &[Vec<f64>], cfg: &LossConfig) -> Result<f64> {
    let c = probs.first().map_or(0, Vec::len);
    let w = cfg.class_weights(c)?;
    if probs.len() != targets.len() || probs.iter().chain(targets).any(|r| r.len() != c) {
        return Err(Error::shape("probabilities and targets disagree in shape"));
    }
    if probs.is_empty() {
        return Err(Error::contract("focal loss over an empty batch"));
    }
    let hi = 1.0 - PROB_CLAMP;
    let mut total = 0.0;
    for (p_row, y_row) in probs.iter().zip(targets) {
        for (j, (&p, &y)) in p_row.iter().zip(y_row).enumerate() {
            let p = p.clamp(PROB_CLAMP, hi);
            let pos = y * (1.0 - p).powf(cfg.gamma) * -p.ln();
            let neg = (1.0 - y) * p.powf(cfg.gamma) * -(1.0 - p).ln();
            total += w[j] * (pos + neg);
        }
    }
    Ok(total / probs.len() as f64)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::tensor::{Tape, Tensor};

    fn cfg(gamma: f64, beta: f64, counts: Vec<usize>) -> LossConfig {
        LossConfig {
            gamma,
            beta,
            class_counts: counts,
        }
    }

    #[test]
    fn class_weight_examples() {
        for beta in [0.0, 0.5, 0.9999] {
            assert_eq!(class_weight(beta, 1), 1.0);
        }
        let w = class_weight(0.9999, 10_000);
        // (1 − β)/(1 − β^n) with β^n = exp(n·ln β)
        let oracle = 1e-4 / (1.0 - (10_000.0 * (0.9999f64).ln()).exp());
        assert!((w - oracle).abs() / oracle < 1e-12);
        assert!((w - 1.582e-4).abs() / 1.582e-4 < 1e-3);
        assert_eq!(class_weight(0.9999, 0), 1.0);
        assert!(cfg(0.5, 0.9, vec![1]).class_weights(2).is_err());
    }

    #[test]
    fn closed_form_value() {
        let l = class_balanced_focal_loss(&[vec![0.5]], &[vec![1.0]], &cfg(0.5, 0.0, vec![3])).unwrap();
        assert!((l - 0.5f64.sqrt() * 2f64.ln()).abs() < 1e-12);
        assert!((l - 0.49012).abs() < 1e-5);
    }

    #[test]
    fn gamma_zero_is_weighted_bce() {
        let probs: Vec<Vec<f64>> = vec![vec![0.2, 0.7, 0.99], vec![0.5, 0.01, 0.6]];
        let y: Vec<Vec<f64>> = vec![vec![1.0, 0.0, 1.0], vec![0.0, 0.0, 1.0]];
        let c = cfg(0.0, 0.99, vec![4, 40, 400]);
        let w = c.class_weights(3).unwrap();
        let mut bce = 0.0;
        for (pr, yr) in probs.iter().zip(&y) {
            for j in 0..3 {
                bce -= w[j] * (yr[j] * pr[j].ln() + (1.0 - yr[j]) * (1.0 - pr[j]).ln());
            }
        }
        let l = class_balanced_focal_loss(&probs, &y, &c).unwrap();
        assert!((l - bce / 2.0).abs() < 1e-9);
    }

    #[test]
    fn tape_loss_matches_reference() {
        let probs = vec![vec![0.2, 0.7], vec![1.0, 0.0]];
        let y = vec![vec![1.0, 0.0], vec![1.0, 1.0]];
        let c = cfg(0.5, 0.999, vec![2, 9]);
        let want = class_balanced_focal_loss(&probs, &y, &c).unwrap();
        let mut tape = Tape::<f64>::new();
        let p = tape.constant(Tensor::new(vec![2, 2], probs.concat()).unwrap());
        let l = tape
            .focal_loss(p, Tensor::new(vec![2, 2], y.concat()).unwrap(), c.class_weights(2).unwrap(), 0.5, PROB_CLAMP)
            .unwrap();
        assert!((tape.value(l).item() - want).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn loss_is_nonnegative(p in prop::collection::vec(0.0f64..=1.0, 1..12), bits in prop::collection::vec(prop::bool::ANY, 12), gamma in 0.0f64..3.0) {
            let y: Vec<f64> = p.iter().zip(&bits).map(|(_, &b)| b as u8 as f64).collect();
            let c = cfg(gamma, 0.9, vec![5; p.len()]);
            prop_assert!(class_balanced_focal_loss(&[p.clone()], &[y], &c).unwrap() >= 0.0);
        }

        #[test]
        fn focusing_shrinks_loss_of_correct_examples(p in 0.51f64..0.999, g1 in 0.0f64..2.0, dg in 0.01f64..2.0) {
            let a = class_balanced_focal_loss(&[vec![p]], &[vec![1.0]], &cfg(g1, 0.0, vec![1])).unwrap();
            let b = class_balanced_focal_loss(&[vec![p]], &[vec![1.0]], &cfg(g1 + dg, 0.0, vec![1])).unwrap();
            prop_assert!(b < a);
        }
    }

    #[test]
    fn saturated_predictions_reach_the_floor() {
        let c = cfg(0.5, 0.0, vec![1, 1]);
        let l = class_balanced_focal_loss(&[vec![1.0, 0.0]], &[vec![1.0, 0.0]], &c).unwrap();
        let floor = 2.0 * PROB_CLAMP.powf(0.5) * -(1.0 - PROB_CLAMP).ln();
        assert!((l - floor).abs() < 1e-18);
        assert!(l < 1e-9);
    }
}
