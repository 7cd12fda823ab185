use serde::{Deserialize, Serialize};

use super::{log_sum_exp, LossResult, Slot};
use crate::error::{Result, TceError};

/// Counter-clockwise quarter turns used by the auxiliary task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Rotation {
    R0,
    R90,
    R180,
    R270,
}

impl Rotation {
    pub const ALL: [Rotation; 4] = [Rotation::R0, Rotation::R90, Rotation::R180, Rotation::R270];

    /// Number of quarter turns, 0..=3.
    pub fn quarter_turns(self) -> usize {
        self as usize
    }

    pub fn from_quarter_turns(k: usize) -> Rotation {
        Rotation::ALL[k % 4]
    }

    pub fn degrees(self) -> u32 {
        90 * self as u32
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|z| (z - lse).exp()).collect()
}

/// `-ln softmax(logits)[target]` with gradient `softmax - onehot`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(TceError::arg(format!(
            "target class {target} out of range for {} logits",
            logits.len()
        )));
    }
    if let Some(z) = logits.iter().find(|z| !z.is_finite()) {
        return Err(TceError::NonFinite(format!("logit {z}")));
    }
    let lse = log_sum_exp(logits);
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[target] -= 1.0;
    Ok((lse - logits[target], grad))
}

pub fn rotation_aux_loss(logits: &[f64], target: Rotation) -> Result<LossResult> {
    if logits.len() != 4 {
        return Err(TceError::DimensionMismatch {
            expected: 4,
            got: logits.len(),
        });
    }
    let (value, grad) = softmax_cross_entropy(logits, target.quarter_turns())?;
    let mut out = LossResult::new(value);
    out.accumulate(Slot::Logits, &grad, 1.0)?;
    Ok(out)
}
