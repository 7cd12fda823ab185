use crate::error::{Result, TceError};

use super::encoder::{quantize, Param};

/// SGD with classical momentum, `v ← μv + g`, `θ ← θ − ηv`. After every
/// step both `θ` and `v` are rounded to `f32` so that checkpoints capture
/// the exact optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &[Param], lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    /// Applies one update; `mask[i] == false` freezes parameter `i`.
    pub fn step(&mut self, params: &mut [Param], grads: &[Vec<f64>], mask: Option<&[bool]>) -> Result<()> {
        if grads.len() != params.len() || self.velocity.len() != params.len() {
            return Err(TceError::arg("gradient and parameter lists differ in length"));
        }
        for (i, ((p, g), v)) in params.iter_mut().zip(grads).zip(&mut self.velocity).enumerate() {
            if mask.is_some_and(|m| !m[i]) {
                continue;
            }
            for ((w, &gi), vi) in p.data.iter_mut().zip(g).zip(v.iter_mut()) {
                *vi = quantize(self.momentum * *vi + gi);
                *w = quantize(*w - self.lr * *vi);
            }
            if p.data.iter().any(|w| !w.is_finite()) {
                return Err(TceError::NonFinite(format!("parameter {} after SGD step", p.name)));
            }
        }
        Ok(())
    }
}
