//! Temporal coherency objectives with analytic gradients.
//!
//! Every loss takes raw vectors (not necessarily unit norm) because the
//! similarity is the cosine, and returns a [`LossResult`] whose gradients
//! are keyed by the role each input played ([`Slot`]). That keying is what
//! lets [`combined_loss`] accumulate gradients for inputs shared between
//! terms, such as the anchor appearing in both the first- and second-order
//! losses.

mod contrastive;
mod rotation;
mod second_order;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Result, TceError};

pub use contrastive::{first_order_loss, nce_loss};
pub use rotation::{rotation_aux_loss, softmax, softmax_cross_entropy, Rotation};
pub use second_order::second_order_loss;

/// Role of an input vector within a loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Slot {
    /// `f_t`
    Anchor,
    /// `f_{t+1}`
    Positive,
    /// `f_{t+2}`, second-order only
    Next,
    /// First-order negative `i`.
    Negative(usize),
    /// Second-order (within-video) negative `i`.
    WithinVideoNegative(usize),
    /// Rotation classifier logits.
    Logits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    grads: BTreeMap<Slot, Vec<f64>>,
}

impl LossResult {
    pub(crate) fn new(value: f64) -> Self {
        LossResult {
            value,
            grads: BTreeMap::new(),
        }
    }

    pub(crate) fn accumulate(&mut self, slot: Slot, g: &[f64], scale: f64) -> Result<()> {
        match self.grads.get_mut(&slot) {
            Some(acc) => {
                if acc.len() != g.len() {
                    return Err(TceError::DimensionMismatch {
                        expected: acc.len(),
                        got: g.len(),
                    });
                }
                for (a, x) in acc.iter_mut().zip(g) {
                    *a += scale * x;
                }
            }
            None => {
                self.grads.insert(slot, g.iter().map(|x| scale * x).collect());
            }
        }
        Ok(())
    }

    pub fn grad(&self, slot: Slot) -> Option<&[f64]> {
        self.grads.get(&slot).map(Vec::as_slice)
    }

    pub fn grads(&self) -> impl Iterator<Item = (Slot, &[f64])> {
        self.grads.iter().map(|(s, g)| (*s, g.as_slice()))
    }

    pub fn is_finite(&self) -> bool {
        self.value.is_finite() && self.grads.values().flatten().all(|g| g.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NceMode {
    #[default]
    ExactSoftmax,
    Nce,
}

/// Partition estimate `Z` for NCE mode.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum ZEstimate {
    /// Estimated once from the first batch, then frozen.
    #[default]
    Auto,
    Fixed(f64),
}

impl fmt::Display for ZEstimate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ZEstimate::Auto => f.write_str("auto"),
            ZEstimate::Fixed(z) => write!(f, "{z}"),
        }
    }
}

impl Serialize for ZEstimate {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            ZEstimate::Auto => s.serialize_str("auto"),
            ZEstimate::Fixed(z) => s.serialize_f64(*z),
        }
    }
}

impl<'de> Deserialize<'de> for ZEstimate {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(z) if z > 0.0 => Ok(ZEstimate::Fixed(z)),
            Raw::Num(z) => Err(serde::de::Error::custom(format!("Z must be positive, got {z}"))),
            Raw::Str(s) if s == "auto" => Ok(ZEstimate::Auto),
            Raw::Str(s) => s
                .parse::<f64>()
                .ok()
                .filter(|z| *z > 0.0)
                .map(ZEstimate::Fixed)
                .ok_or_else(|| serde::de::Error::custom(format!("expected \"auto\" or a positive number, got {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub temperature: f64,
    /// Number of first-order negatives N₁.
    pub negatives: usize,
    /// Number of within-video second-order negatives N₂.
    pub within_video_negatives: usize,
    pub first_order_weight: f64,
    /// 0 disables the second-order term.
    pub second_order_weight: f64,
    /// 0 disables the rotation auxiliary task.
    pub aux_weight: f64,
    pub nce_mode: NceMode,
    pub z_estimate: ZEstimate,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 1.0,
            negatives: 8192,
            within_video_negatives: 100,
            first_order_weight: 5.0,
            second_order_weight: 1.0,
            aux_weight: 1.0,
            nce_mode: NceMode::ExactSoftmax,
            z_estimate: ZEstimate::Auto,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(TceError::Config(format!(
                "loss.temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.negatives < 1 {
            return Err(TceError::Config("loss.negatives must be >= 1".into()));
        }
        for (name, w) in [
            ("first_order_weight", self.first_order_weight),
            ("second_order_weight", self.second_order_weight),
            ("aux_weight", self.aux_weight),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(TceError::Config(format!("loss.{name} must be >= 0, got {w}")));
            }
        }
        if let ZEstimate::Fixed(z) = self.z_estimate {
            if !(z > 0.0) {
                return Err(TceError::Config(format!("loss.z_estimate must be positive, got {z}")));
            }
        }
        Ok(())
    }
}

/// `w₁·L₁ + w₂·L₂ + w_rot·L_rot`, with gradients for shared slots summed.
pub fn combined_loss(
    first: &LossResult,
    second: Option<&LossResult>,
    aux: Option<&LossResult>,
    config: &LossConfig,
) -> Result<LossResult> {
    let mut out = LossResult::new(0.0);
    let parts = [
        (Some(first), config.first_order_weight),
        (second, config.second_order_weight),
        (aux, config.aux_weight),
    ];
    for (part, w) in parts {
        let Some(part) = part else { continue };
        out.value += w * part.value;
        for (slot, g) in part.grads() {
            out.accumulate(slot, g, w)?;
        }
    }
    Ok(out)
}

/// `ln(sum(exp(x)))` with max subtraction.
pub(crate) fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

pub(crate) fn check_dims(expected: usize, vs: &[&[f64]]) -> Result<()> {
    match vs.iter().find(|v| v.len() != expected) {
        Some(v) => Err(TceError::DimensionMismatch {
            expected,
            got: v.len(),
        }),
        None => Ok(()),
    }
}

pub(crate) fn check_temperature(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(TceError::arg(format!("temperature must be positive, got {tau}")))
    }
}
