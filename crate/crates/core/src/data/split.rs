use std::collections::BTreeMap;

use rand::seq::SliceRandom;

use crate::error::{Result, TceError};
use crate::rng::derive_rng;

/// Video positions assigned to training and held-out evaluation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub held_out: Vec<usize>,
}

/// Seeded split by video. With labels the split is stratified: each class
/// contributes `round(fraction · n_c)` held-out videos, at least one when
/// the class has two or more videos and the fraction is positive.
pub fn split_videos(labels: &[Option<usize>], fraction: f64, seed: u64) -> Result<Split> {
    if !(0.0..1.0).contains(&fraction) {
        return Err(TceError::Config(format!("held-out fraction must be in [0, 1), got {fraction}")));
    }
    if labels.is_empty() {
        return Err(TceError::Dataset("cannot split an empty dataset".into()));
    }
    let mut rng = derive_rng(seed, "split", &[]);
    let groups: Vec<Vec<usize>> = if labels.iter().all(Option::is_some) {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            by_class.entry(l.unwrap()).or_default().push(i);
        }
        by_class.into_values().collect()
    } else {
        vec![(0..labels.len()).collect()]
    };
    let mut split = Split {
        train: Vec::new(),
        held_out: Vec::new(),
    };
    for mut g in groups {
        g.shuffle(&mut rng);
        let mut k = (fraction * g.len() as f64).round() as usize;
        if fraction > 0.0 && g.len() >= 2 {
            k = k.clamp(1, g.len() - 1);
        }
        split.held_out.extend_from_slice(&g[..k]);
        split.train.extend_from_slice(&g[k..]);
    }
    split.train.sort_unstable();
    split.held_out.sort_unstable();
    Ok(split)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stratified_and_deterministic() {
        let labels: Vec<Option<usize>> = (0..40).map(|i| Some(i / 10)).collect();
        let s = split_videos(&labels, 0.2, 7).unwrap();
        assert_eq!(s.held_out.len(), 8);
        assert_eq!(s.train.len(), 32);
        for c in 0..4 {
            assert_eq!(s.held_out.iter().filter(|&&i| i / 10 == c).count(), 2);
        }
        assert_eq!(s, split_videos(&labels, 0.2, 7).unwrap());
        assert_ne!(s, split_videos(&labels, 0.2, 8).unwrap());
    }

    #[test]
    fn edge_cases() {
        let labels = vec![None; 5];
        let none = split_videos(&labels, 0.0, 0).unwrap();
        assert!(none.held_out.is_empty());
        assert_eq!(none.train, vec![0, 1, 2, 3, 4]);
        let tiny = split_videos(&[Some(0), Some(0)], 0.1, 0).unwrap();
        assert_eq!((tiny.train.len(), tiny.held_out.len()), (1, 1));
        assert!(split_videos(&labels, 1.0, 0).is_err());
        assert!(split_videos(&[], 0.2, 0).is_err());
    }
}
