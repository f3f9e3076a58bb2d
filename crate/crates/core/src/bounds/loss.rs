//! Losses bounded in `[0, 1]`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::argmax;
use crate::taskgen::Example;
use crate::zoo::{logits, probabilities};

pub fn zero_one_loss(prediction: usize, label: usize) -> f64 {
    if prediction == label {
        0.0
    } else {
        1.0
    }
}

/// Total-variation distance between a one-hot label and predicted
/// probabilities: `sum_j |y_j - p_j| / 2`.
pub fn bounded_ordinal_loss(label_onehot: &[f64], probs: &[f64]) -> Result<f64> {
    if label_onehot.len() != probs.len() || probs.is_empty() {
        return Err(Error::invalid("label and probability vectors differ in length"));
    }
    let total: f64 = probs.iter().sum();
    if probs.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) || (total - 1.0).abs() > 1e-9 {
        return Err(Error::invalid("probabilities must be nonnegative and sum to 1"));
    }
    let ones = label_onehot.iter().filter(|&&y| y == 1.0).count();
    if ones != 1 || label_onehot.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::invalid("label must be one-hot"));
    }
    let tv = label_onehot.iter().zip(probs).map(|(y, p)| (y - p).abs()).sum::<f64>() / 2.0;
    Ok(tv.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    ZeroOne,
    BoundedOrdinal,
}

impl Loss {
    pub fn name(self) -> &'static str {
        match self {
            Loss::ZeroOne => "zero_one",
            Loss::BoundedOrdinal => "bounded_ordinal",
        }
    }

    /// Upper bound `C` of the loss.
    pub fn max_value(self) -> f64 {
        1.0
    }

    /// Loss of the linear head `theta` on one example.
    pub fn eval(self, theta: &[f64], k: usize, e: &Example) -> f64 {
        match self {
            Loss::ZeroOne => zero_one_loss(argmax(&logits(theta, k, &e.features)), e.label),
            Loss::BoundedOrdinal => {
                let p = probabilities(theta, k, &e.features);
                // sum_j |y_j - p_j| / 2 = 1 - p_y for a distribution
                (1.0 - p[e.label]).clamp(0.0, 1.0)
            }
        }
    }

    /// Mean loss over `examples`.
    pub fn mean(self, theta: &[f64], k: usize, examples: &[Example]) -> Result<f64> {
        if examples.is_empty() {
            return Err(Error::invalid("cannot average a loss over no examples"));
        }
        let sum: f64 = examples.iter().map(|e| self.eval(theta, k, e)).sum();
        Ok(sum / examples.len() as f64)
    }
}
