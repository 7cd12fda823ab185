//! Persistent store of the most recent embedding of every frame (or of every
//! video), used to supply negatives without re-running the encoder.
//!
//! Ordering contract: a training step reads the bank through `&MemoryBank`
//! for the whole batch, and only afterwards applies that batch's updates
//! through `&mut MemoryBank`. The borrow checker enforces the split as long
//! as callers collect updates before writing them.

use rand::seq::index::sample;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{normalize, Embedding};
use crate::error::{Result, TceError};
use crate::index::{DatasetIndex, FrameRef};
use crate::rng::{derive_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BankMode {
    PerFrame,
    PerVideo,
}

/// Position of an entry in the bank. Keys are ordered video-major, then by
/// frame, so ascending key order is ascending `(video_id, frame_index)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BankKey(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryBank {
    mode: BankMode,
    dim: usize,
    update_rate: f64,
    /// First key of each video; `offsets[v + 1] - offsets[v]` entries per video.
    offsets: Vec<usize>,
    entries: Vec<Embedding>,
}

fn random_unit(dim: usize, rng: &mut Rng) -> Embedding {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if let Ok(e) = normalize(&v) {
            return e;
        }
    }
}

impl MemoryBank {
    /// One independent uniform-on-the-sphere entry per frame (or per video).
    pub fn init(index: &DatasetIndex, dim: usize, mode: BankMode, seed: u64) -> Result<Self> {
        let lengths: Vec<usize> = index.videos().iter().map(|v| v.length).collect();
        Self::init_from_lengths(&lengths, dim, mode, seed)
    }

    pub fn init_from_lengths(
        lengths: &[usize],
        dim: usize,
        mode: BankMode,
        seed: u64,
    ) -> Result<Self> {
        if dim < 2 {
            return Err(TceError::arg(format!("embedding dimension must be >= 2, got {dim}")));
        }
        let offsets = Self::layout(lengths, mode);
        let mut rng = derive_rng(seed, "memory-bank-init", &[]);
        let total = *offsets.last().unwrap_or(&0);
        let entries = (0..total).map(|_| random_unit(dim, &mut rng)).collect();
        Ok(MemoryBank {
            mode,
            dim,
            update_rate: 1.0,
            offsets,
            entries,
        })
    }

    /// Rebuilds a bank from stored entries (checkpoint loading).
    pub fn from_parts(
        mode: BankMode,
        lengths: &[usize],
        dim: usize,
        update_rate: f64,
        entries: Vec<Embedding>,
    ) -> Result<Self> {
        let offsets = Self::layout(lengths, mode);
        let total = *offsets.last().unwrap_or(&0);
        if entries.len() != total {
            return Err(TceError::DimensionMismatch {
                expected: total,
                got: entries.len(),
            });
        }
        if let Some(e) = entries.iter().find(|e| e.dim() != dim) {
            return Err(TceError::DimensionMismatch {
                expected: dim,
                got: e.dim(),
            });
        }
        let mut bank = MemoryBank {
            mode,
            dim,
            update_rate: 1.0,
            offsets,
            entries,
        };
        bank.set_update_rate(update_rate)?;
        Ok(bank)
    }

    fn layout(lengths: &[usize], mode: BankMode) -> Vec<usize> {
        let mut offsets = Vec::with_capacity(lengths.len() + 1);
        let mut acc = 0;
        offsets.push(0);
        for &t in lengths {
            acc += match mode {
                BankMode::PerFrame => t,
                BankMode::PerVideo => 1,
            };
            offsets.push(acc);
        }
        offsets
    }

    pub fn mode(&self) -> BankMode {
        self.mode
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_videos(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn update_rate(&self) -> f64 {
        self.update_rate
    }

    /// Sets the blend factor λ in `(0, 1]`; 1 means direct replacement.
    pub fn set_update_rate(&mut self, rate: f64) -> Result<()> {
        if !(rate > 0.0 && rate <= 1.0) {
            return Err(TceError::arg(format!("update rate must be in (0, 1], got {rate}")));
        }
        self.update_rate = rate;
        Ok(())
    }

    pub fn entries(&self) -> &[Embedding] {
        &self.entries
    }

    pub fn get(&self, key: BankKey) -> Result<&Embedding> {
        self.entries.get(key.0).ok_or(TceError::UnknownKey(key.0))
    }

    /// The key holding `frame`. In per-video mode every frame of a video
    /// maps to the video's single entry.
    pub fn key_for(&self, frame: FrameRef) -> Result<BankKey> {
        if frame.video_id >= self.num_videos() {
            return Err(TceError::UnknownKey(frame.video_id));
        }
        match self.mode {
            BankMode::PerVideo => Ok(BankKey(frame.video_id)),
            BankMode::PerFrame => {
                let start = self.offsets[frame.video_id];
                let len = self.offsets[frame.video_id + 1] - start;
                if frame.frame_index >= len {
                    return Err(TceError::UnknownKey(start + frame.frame_index));
                }
                Ok(BankKey(start + frame.frame_index))
            }
        }
    }

    pub fn video_of(&self, key: BankKey) -> usize {
        // offsets is sorted; the video is the last offset <= key
        self.offsets.partition_point(|&o| o <= key.0) - 1
    }

    /// Keys belonging to video `v`, as a contiguous range.
    pub fn video_keys(&self, v: usize) -> std::ops::Range<usize> {
        self.offsets[v]..self.offsets[v + 1]
    }

    /// `entry <- normalize((1 - λ) old + λ new)`; with λ = 1 the entry becomes
    /// `new` exactly.
    pub fn update(&mut self, key: BankKey, new: &Embedding) -> Result<&Embedding> {
        if new.dim() != self.dim {
            return Err(TceError::DimensionMismatch {
                expected: self.dim,
                got: new.dim(),
            });
        }
        let lambda = self.update_rate;
        let slot = self
            .entries
            .get_mut(key.0)
            .ok_or(TceError::UnknownKey(key.0))?;
        if lambda == 1.0 {
            *slot = new.clone();
        } else {
            let blended: Vec<f64> = slot
                .iter()
                .zip(new.iter())
                .map(|(o, n)| (1.0 - lambda) * o + lambda * n)
                .collect();
            *slot = normalize(&blended)?;
        }
        Ok(slot)
    }

    /// Overwrites an entry without blending.
    pub fn set(&mut self, key: BankKey, value: Embedding) -> Result<()> {
        if value.dim() != self.dim {
            return Err(TceError::DimensionMismatch {
                expected: self.dim,
                got: value.dim(),
            });
        }
        *self.entries.get_mut(key.0).ok_or(TceError::UnknownKey(key.0))? = value;
        Ok(())
    }

    /// Rounds every entry to `f32` precision, the precision checkpoints keep.
    pub fn round_to_f32(&mut self) {
        for e in &mut self.entries {
            *e = e.to_f32_precision();
        }
    }

    /// Draws `n` keys uniformly without replacement from every video except
    /// `exclude_video`.
    pub fn sample_uniform_negatives(
        &self,
        exclude_video: usize,
        n: usize,
        rng: &mut Rng,
    ) -> Result<Vec<BankKey>> {
        let excluded = if exclude_video < self.num_videos() {
            self.video_keys(exclude_video)
        } else {
            0..0
        };
        let available = self.len() - excluded.len();
        if n > available {
            return Err(TceError::InsufficientNegatives {
                requested: n,
                available,
            });
        }
        Ok(sample(rng, available, n)
            .into_iter()
            .map(|i| {
                if i < excluded.start {
                    BankKey(i)
                } else {
                    BankKey(i + excluded.len())
                }
            })
            .collect())
    }
}
