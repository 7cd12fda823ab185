use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::container::{self, NamedArray};
use super::PretrainConfig;
use crate::embedding::Embedding;
use crate::error::{Result, TceError};
use crate::memory_bank::{BankMode, MemoryBank};
use crate::nn::{Encoder, Param};

const KIND: &str = "pretrain";

/// Everything needed to resume or evaluate a pretraining run. Random
/// streams are derived from the root seed and the epoch counter, so those
/// two fully determine the generator state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Completed epochs; 0 is the initialisation.
    pub epoch: usize,
    pub config: PretrainConfig,
    pub encoder: Vec<Param>,
    /// Running projection statistics.
    pub buffers: Vec<Param>,
    /// Momentum buffers aligned with `encoder`.
    pub velocity: Vec<Vec<f64>>,
    pub bank: MemoryBank,
    /// Frame counts of the training videos (the bank layout).
    pub bank_lengths: Vec<usize>,
    pub z_estimate: Option<f64>,
    /// Dataset positions of the videos the bank covers.
    pub training_videos: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    kind: String,
    epoch: usize,
    config: PretrainConfig,
    bank_mode: BankMode,
    bank_update_rate: f64,
    bank_lengths: Vec<usize>,
    z_estimate: Option<f64>,
    training_videos: Vec<usize>,
    rng_root_seed: u64,
    rng_next_epoch: usize,
}

impl Checkpoint {
    pub fn build_encoder(&self) -> Result<Encoder> {
        Encoder::from_parts(self.config.encoder.clone(), self.encoder.clone(), self.buffers.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            kind: KIND.into(),
            epoch: self.epoch,
            config: self.config.clone(),
            bank_mode: self.bank.mode(),
            bank_update_rate: self.bank.update_rate(),
            bank_lengths: self.bank_lengths.clone(),
            z_estimate: self.z_estimate,
            training_videos: self.training_videos.clone(),
            rng_root_seed: self.config.train.seed,
            rng_next_epoch: self.epoch,
        };
        let mut arrays: Vec<NamedArray> = self
            .encoder
            .iter()
            .map(|p| NamedArray::new(format!("encoder/{}", p.name), p.shape.clone(), p.data.clone()))
            .collect();
        arrays.extend(
            self.encoder
                .iter()
                .zip(&self.velocity)
                .map(|(p, v)| NamedArray::new(format!("momentum/{}", p.name), p.shape.clone(), v.clone())),
        );
        arrays.extend(
            self.buffers
                .iter()
                .map(|p| NamedArray::new(format!("buffers/{}", p.name), p.shape.clone(), p.data.clone())),
        );
        let entries: Vec<f64> = self.bank.entries().iter().flat_map(|e| e.iter().copied()).collect();
        arrays.push(NamedArray::new(
            "bank/entries",
            vec![self.bank.len(), self.bank.dim()],
            entries,
        ));
        container::encode(&json!(meta), &arrays)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (meta, arrays) = container::decode(bytes)?;
        let meta: Meta =
            serde_json::from_value(meta).map_err(|e| TceError::Checkpoint(format!("bad checkpoint metadata: {e}")))?;
        if meta.kind != KIND {
            return Err(TceError::Checkpoint(format!("expected a {KIND} checkpoint, found {}", meta.kind)));
        }
        let mut encoder = Vec::new();
        let mut velocity = Vec::new();
        let mut buffers = Vec::new();
        let mut bank_entries = None;
        for a in arrays {
            if let Some(name) = a.name.strip_prefix("encoder/") {
                encoder.push(Param {
                    name: name.into(),
                    shape: a.shape,
                    data: a.data,
                });
            } else if let Some(name) = a.name.strip_prefix("buffers/") {
                buffers.push(Param {
                    name: name.into(),
                    shape: a.shape,
                    data: a.data,
                });
            } else if a.name.starts_with("momentum/") {
                velocity.push(a.data);
            } else if a.name == "bank/entries" {
                bank_entries = Some(a);
            } else {
                return Err(TceError::Checkpoint(format!("unexpected array {}", a.name)));
            }
        }
        if velocity.len() != encoder.len() {
            return Err(TceError::Checkpoint("momentum buffers do not match the encoder".into()));
        }
        let bank = bank_entries.ok_or_else(|| TceError::Checkpoint("missing bank/entries".into()))?;
        let [_, dim] = bank.shape[..] else {
            return Err(TceError::Checkpoint("bank/entries must be two-dimensional".into()));
        };
        if dim == 0 {
            return Err(TceError::Checkpoint("bank/entries has zero width".into()));
        }
        let entries = bank
            .data
            .chunks_exact(dim)
            .map(|c| Embedding::from_unit(c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let bank = MemoryBank::from_parts(meta.bank_mode, &meta.bank_lengths, dim, meta.bank_update_rate, entries)?;
        let ckpt = Checkpoint {
            epoch: meta.epoch,
            config: meta.config,
            encoder,
            buffers,
            velocity,
            bank,
            bank_lengths: meta.bank_lengths,
            z_estimate: meta.z_estimate,
            training_videos: meta.training_videos,
        };
        // validates names and shapes
        ckpt.build_encoder()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| TceError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| TceError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    ckpt.save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path)
}
