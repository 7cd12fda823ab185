//! Annealed semi-hard negative mining.
//!
//! Each anchor carries a similarity cap `r(t)` that rises from `r₀` to
//! (almost) `r_E` over training. Bank entries whose cosine similarity to the
//! anchor is at most the cap count as "outside the hypersphere"; the closest
//! of those are mined, and any shortfall is filled at random from the rest.

use std::cmp::Ordering;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::embedding::dot;
use crate::error::{Result, TceError};
use crate::memory_bank::{BankKey, MemoryBank};
use crate::rng::Rng;

/// Rate constant of the radius schedule: `r(E)` sits `e^{-5}` short of `r_E`.
pub const DECAY_RATE: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MiningSchedule {
    pub r0: f64,
    pub r_end: f64,
    /// Total training epochs `E`. Not a config key: pretraining sets it from
    /// the training epoch count.
    #[serde(skip)]
    pub epochs: f64,
    pub enabled: bool,
}

impl Default for MiningSchedule {
    fn default() -> Self {
        MiningSchedule {
            r0: -1.0,
            r_end: 1.0,
            epochs: 9.0,
            enabled: true,
        }
    }
}

impl MiningSchedule {
    pub fn new(r0: f64, r_end: f64, epochs: f64) -> Result<Self> {
        let s = MiningSchedule {
            r0,
            r_end,
            epochs,
            enabled: true,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let in_range = |r: f64| (-1.0..=1.0).contains(&r);
        if !in_range(self.r0) || !in_range(self.r_end) || self.r0 > self.r_end {
            return Err(TceError::Config(format!(
                "mining radii must satisfy -1 <= r0 <= r_end <= 1, got r0={} r_end={}",
                self.r0, self.r_end
            )));
        }
        if !(self.epochs > 0.0) || !self.epochs.is_finite() {
            return Err(TceError::Config(format!(
                "mining epochs must be positive, got {}",
                self.epochs
            )));
        }
        Ok(())
    }

    /// `r(t) = r₀ + (r_E - r₀)(1 - e^{-5t/E})` for epoch progress `t ∈ [0, E]`.
    pub fn radius(&self, t: f64) -> Result<f64> {
        if !(0.0..=self.epochs).contains(&t) {
            return Err(TceError::arg(format!(
                "epoch progress {t} outside [0, {}]",
                self.epochs
            )));
        }
        Ok(self.r0 + (self.r_end - self.r0) * (-(-DECAY_RATE * t / self.epochs).exp_m1()))
    }
}

fn by_similarity_desc(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Picks `n` negatives for `anchor` from every bank entry outside
/// `anchor_video`: the `n` most similar entries with similarity `<= radius`
/// (ties by ascending key), topped up by uniform sampling without replacement
/// from the remaining candidates.
///
/// Bank entries are unit norm, so the similarity is the dot product with the
/// (unit) anchor.
pub fn select_negatives(
    bank: &MemoryBank,
    anchor: &[f64],
    anchor_video: usize,
    n: usize,
    radius: f64,
    rng: &mut Rng,
) -> Result<Vec<BankKey>> {
    if anchor.len() != bank.dim() {
        return Err(TceError::DimensionMismatch {
            expected: bank.dim(),
            got: anchor.len(),
        });
    }
    let excluded = if anchor_video < bank.num_videos() {
        bank.video_keys(anchor_video)
    } else {
        0..0
    };
    let available = bank.len() - excluded.len();
    if n > available {
        return Err(TceError::InsufficientNegatives {
            requested: n,
            available,
        });
    }
    let anchor_norm = crate::embedding::l2_norm(anchor);
    if !(anchor_norm > 0.0) {
        return Err(TceError::ZeroNorm);
    }

    let mut eligible: Vec<(f64, usize)> = Vec::new();
    let mut rest: Vec<usize> = Vec::new();
    for (k, e) in bank.entries().iter().enumerate() {
        if excluded.contains(&k) {
            continue;
        }
        let s = dot(anchor, e) / anchor_norm;
        if s <= radius {
            eligible.push((s, k));
        } else {
            rest.push(k);
        }
    }

    if eligible.len() > n {
        if n > 0 {
            eligible.select_nth_unstable_by(n - 1, by_similarity_desc);
        }
        eligible.truncate(n);
    }
    eligible.sort_unstable_by(by_similarity_desc);
    let mut keys: Vec<BankKey> = eligible.iter().map(|&(_, k)| BankKey(k)).collect();

    let shortfall = n - keys.len();
    if shortfall > 0 {
        keys.extend(
            sample(rng, rest.len(), shortfall)
                .into_iter()
                .map(|i| BankKey(rest[i])),
        );
    }
    Ok(keys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::Embedding;
    use crate::memory_bank::BankMode;
    use crate::rng::derive_rng;

    #[test]
    fn radius_fixtures() {
        let s = MiningSchedule::new(-1.0, 1.0, 9.0).unwrap();
        assert_eq!(s.radius(0.0).unwrap(), -1.0);
        assert!((s.radius(9.0).unwrap() - 0.986_524_106_001_829_1).abs() < 1e-12);
        assert!((s.radius(4.5).unwrap() - 0.835_830_002_752_202_4).abs() < 1e-12);
        assert!(s.radius(-0.1).is_err());
        assert!(s.radius(9.01).is_err());
        assert!(MiningSchedule::new(0.5, 0.1, 1.0).is_err());
        assert!(MiningSchedule::new(-2.0, 1.0, 1.0).is_err());
        assert!(MiningSchedule::new(-1.0, 1.0, 0.0).is_err());
    }

    /// Bank of one anchor video (key 0) plus six entries at fixed
    /// similarities to e1.
    fn fixture_bank() -> (MemoryBank, Vec<f64>) {
        let sims = [0.9, 0.5, 0.1, -0.2, -0.6, -0.9];
        let mut entries = vec![Embedding::from_unit(vec![1.0, 0.0]).unwrap()];
        for s in sims {
            entries.push(Embedding::from_unit(vec![s, (1.0f64 - s * s).sqrt()]).unwrap());
        }
        let lengths = [1, 1, 1, 1, 1, 1, 1];
        let bank = MemoryBank::from_parts(BankMode::PerFrame, &lengths, 2, 1.0, entries).unwrap();
        (bank, vec![1.0, 0.0])
    }

    #[test]
    fn hand_set_similarities() {
        let (bank, anchor) = fixture_bank();
        let mut rng = derive_rng(0, "t", &[]);
        let keys = select_negatives(&bank, &anchor, 0, 2, 0.2, &mut rng).unwrap();
        // similarities 0.1 and -0.2 live at keys 3 and 4
        assert_eq!(keys, vec![BankKey(3), BankKey(4)]);
    }

    #[test]
    fn schedule_boundaries() {
        let (bank, anchor) = fixture_bank();
        let mut rng = derive_rng(0, "t", &[]);
        let all = select_negatives(&bank, &anchor, 0, 3, 1.0, &mut rng).unwrap();
        assert_eq!(all, vec![BankKey(1), BankKey(2), BankKey(3)]);
        let random = select_negatives(&bank, &anchor, 0, 3, -1.0, &mut rng).unwrap();
        assert_eq!(random.len(), 3);
        assert!(random.iter().all(|k| k.0 != 0));
    }

    #[test]
    fn ties_break_by_key() {
        let e = Embedding::from_unit(vec![0.0, 1.0]).unwrap();
        let bank = MemoryBank::from_parts(
            BankMode::PerVideo,
            &[2, 2, 2, 2],
            2,
            1.0,
            vec![e.clone(), e.clone(), e.clone(), e],
        )
        .unwrap();
        let mut rng = derive_rng(0, "t", &[]);
        let keys = select_negatives(&bank, &[1.0, 0.0], 1, 2, 0.5, &mut rng).unwrap();
        assert_eq!(keys, vec![BankKey(0), BankKey(2)]);
    }

    #[test]
    fn insufficient_candidates() {
        let (bank, anchor) = fixture_bank();
        let mut rng = derive_rng(0, "t", &[]);
        assert!(matches!(
            select_negatives(&bank, &anchor, 0, 7, 0.0, &mut rng),
            Err(TceError::InsufficientNegatives { requested: 7, available: 6 })
        ));
        assert!(select_negatives(&bank, &anchor, 0, 0, 0.0, &mut rng).unwrap().is_empty());
    }
}
