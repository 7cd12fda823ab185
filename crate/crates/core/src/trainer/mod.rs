//! Self-supervised pretraining: per step, embed augmented anchor / positive
//! (and the next frame for the second-order term), fetch negatives from the
//! memory bank snapshot, take one SGD step on the combined loss, and only
//! then write the fresh embeddings back to the bank.

pub mod checkpoint;
pub mod container;
pub mod metrics;

use std::path::{Path, PathBuf};

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use metrics::{parse as parse_metrics, EpochMetrics, METRICS_FILE, METRICS_HEADER};

use crate::curvature::{coherency_report, CoherencyReport, VideoRef};
use crate::data::augment::{augment, AugmentationConfig};
use crate::data::split::split_videos;
use crate::data::transforms::rotate90;
use crate::embedding::{dot, Embedding};
use crate::error::{Result, TceError};
use crate::index::{enumerate_anchor_pairs, AnchorMode, AnchorPair, DatasetIndex, VideoSequence};
use crate::losses::{
    combined_loss, first_order_loss, nce_loss, rotation_aux_loss, second_order_loss, LossConfig, LossResult, NceMode,
    Rotation, Slot, ZEstimate,
};
use crate::memory_bank::{BankKey, BankMode, MemoryBank};
use crate::mining::{select_negatives, MiningSchedule};
use crate::image::Image;
use crate::nn::encoder::RotationPass;
use crate::nn::{zero_grads, BatchStats, EmbeddingPass, Encoder, EncoderConfig, Grads, RawPass, Sgd};
use crate::rng::{derive_rng, derive_seed};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs from this (0-based) index on run at `lr / lr_decay_factor`.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    pub anchor_mode: AnchorMode,
    pub bank_mode: BankMode,
    pub bank_update_rate: f64,
    /// Replace the random initial bank with embeddings from the initial
    /// encoder before the first step.
    pub bank_warm_start: bool,
    /// Fraction of videos (per class) kept out of pretraining for the
    /// coherency metrics and downstream validation.
    pub held_out_fraction: f64,
    /// Videos sampled for per-epoch TAC/MAC; 0 uses every held-out video.
    pub coherency_videos: usize,
    pub seed: u64,
    /// Worker threads for per-sample forward/backward passes. Results do not
    /// depend on this value.
    pub workers: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.03,
            momentum: 0.9,
            batch_size: 100,
            epochs: 9,
            lr_decay_epoch: 5,
            lr_decay_factor: 10.0,
            anchor_mode: AnchorMode::EveryFrame,
            bank_mode: BankMode::PerFrame,
            bank_update_rate: 1.0,
            bank_warm_start: true,
            held_out_fraction: 0.2,
            coherency_videos: 0,
            seed: 0,
            workers: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TceError::Config(format!("train.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TceError::Config(format!("train.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(TceError::Config("train.batch_size must be >= 1".into()));
        }
        if self.epochs == 0 {
            return Err(TceError::Config("train.epochs must be >= 1".into()));
        }
        if self.lr_decay_epoch >= self.epochs {
            return Err(TceError::Config(format!(
                "train.lr_decay_epoch ({}) must be below train.epochs ({})",
                self.lr_decay_epoch, self.epochs
            )));
        }
        if !(self.lr_decay_factor >= 1.0) {
            return Err(TceError::Config(format!(
                "train.lr_decay_factor must be >= 1, got {}",
                self.lr_decay_factor
            )));
        }
        if !(self.bank_update_rate > 0.0 && self.bank_update_rate <= 1.0) {
            return Err(TceError::Config(format!(
                "train.bank_update_rate must be in (0, 1], got {}",
                self.bank_update_rate
            )));
        }
        if self.workers == 0 {
            return Err(TceError::Config("train.workers must be >= 1".into()));
        }
        Ok(())
    }

    /// Learning rate used while training the 0-based epoch `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr / self.lr_decay_factor
        } else {
            self.lr
        }
    }
}

/// Everything that shapes a pretraining run; stored in every checkpoint.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub mining: MiningSchedule,
    pub augment: AugmentationConfig,
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.train.validate()?;
        self.loss.validate()?;
        self.mining.validate()?;
        self.augment.validate()?;
        if self.loss.aux_weight > 0.0 && !self.encoder.rotation_head {
            return Err(TceError::Config(
                "loss.aux_weight > 0 needs encoder.rotation_head = true".into(),
            ));
        }
        if self.loss.second_order_weight > 0.0 && self.train.bank_mode == BankMode::PerVideo {
            return Err(TceError::Config(
                "the second-order loss draws within-video negatives and needs train.bank_mode = per-frame".into(),
            ));
        }
        Ok(())
    }

    /// Radius schedule spanning the configured number of training epochs.
    pub fn schedule(&self) -> MiningSchedule {
        MiningSchedule {
            epochs: self.train.epochs as f64,
            ..self.mining.clone()
        }
    }
}

/// Phase markers recorded by [`Trainer::step`]; every step must read the
/// bank, update the weights and only then write the bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepEvent {
    BankRead { step: usize },
    GradientUpdate { step: usize },
    BankWrite { step: usize },
}

/// Output of evaluating one batch against a fixed bank snapshot.
pub struct BatchResult {
    pub mean_loss: f64,
    pub grads: Grads,
    /// Per sample: anchor and positive keys with their fresh embeddings.
    writes: Vec<[(BankKey, Embedding); 2]>,
    pub second_order_skipped: usize,
}

/// Augmented views and projections of one sample.
struct Views {
    anchor_img: Image,
    anchor: RawPass,
    positive: RawPass,
    next: Option<RawPass>,
}

/// Loss of one sample and its gradients w.r.t. the embeddings.
struct SampleLoss {
    loss: f64,
    d_anchor: Option<Vec<f64>>,
    d_positive: Option<Vec<f64>>,
    d_next: Option<Vec<f64>>,
    rotation: Option<(RotationPass, Vec<f64>)>,
    second_order_skipped: bool,
}

pub struct Trainer<'a> {
    cfg: PretrainConfig,
    videos: Vec<&'a VideoSequence>,
    dataset_ids: Vec<usize>,
    index: DatasetIndex,
    encoder: Encoder,
    opt: Sgd,
    bank: MemoryBank,
    bank_lengths: Vec<usize>,
    schedule: MiningSchedule,
    n1: usize,
    z: Option<f64>,
    epoch: usize,
    steps: usize,
    events: Vec<StepEvent>,
    pool: rayon::ThreadPool,
}

fn clip_negatives(cfg: &PretrainConfig, bank: &MemoryBank) -> Result<usize> {
    let widest = (0..bank.num_videos()).map(|v| bank.video_keys(v).len()).max().unwrap_or(0);
    let available = bank.len() - widest;
    if available == 0 {
        return Err(TceError::Config(
            "no negatives available: pretraining needs at least two videos".into(),
        ));
    }
    let n1 = cfg.loss.negatives.min(available);
    if n1 < cfg.loss.negatives {
        info!("clipping N1 from {} to {} (bank size {})", cfg.loss.negatives, n1, bank.len());
    }
    Ok(n1)
}

fn all_frames(videos: &[&VideoSequence]) -> Vec<(usize, usize)> {
    videos
        .iter()
        .enumerate()
        .flat_map(|(v, seq)| (0..seq.len()).map(move |t| (v, t)))
        .collect()
}

/// Projections of every un-augmented training frame, in video-major order.
fn project_all(encoder: &Encoder, videos: &[&VideoSequence], pool: &rayon::ThreadPool) -> Result<Vec<Vec<f64>>> {
    let frames = all_frames(videos);
    pool.install(|| {
        frames
            .par_iter()
            .map(|&(v, t)| encoder.project(videos[v].frame(t)))
            .collect()
    })
}

/// Sets the encoder's projection statistics from a full un-augmented pass
/// over the training frames; returns the projections.
fn calibrate(encoder: &mut Encoder, videos: &[&VideoSequence], pool: &rayon::ThreadPool) -> Result<Vec<Vec<f64>>> {
    let projections = project_all(encoder, videos, pool)?;
    if encoder.config().batch_norm {
        let rows: Vec<&[f64]> = projections.iter().map(Vec::as_slice).collect();
        encoder.set_stats(&BatchStats::of(&rows)?);
    }
    Ok(projections)
}

/// Fills the bank with the embeddings of `projections` (per-video banks take
/// each video's middle frame).
fn warm_start(
    bank: &mut MemoryBank,
    encoder: &Encoder,
    videos: &[&VideoSequence],
    projections: &[Vec<f64>],
) -> Result<()> {
    for (&(v, t), raw) in all_frames(videos).iter().zip(projections) {
        if bank.mode() == BankMode::PerVideo && t != videos[v].len() / 2 {
            continue;
        }
        let key = bank.key_for(crate::index::FrameRef::new(v, t))?;
        bank.set(key, encoder.embed_projection(raw)?.to_f32_precision())?;
    }
    Ok(())
}

fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| TceError::Config(format!("cannot start worker pool: {e}")))
}

impl<'a> Trainer<'a> {
    /// Sets up a fresh run over `videos` (positions `dataset_ids` in the
    /// source dataset).
    pub fn new(cfg: PretrainConfig, videos: Vec<&'a VideoSequence>, dataset_ids: Vec<usize>) -> Result<Self> {
        cfg.validate()?;
        let seed = cfg.train.seed;
        let lengths: Vec<usize> = videos.iter().map(|v| v.len()).collect();
        let mut bank = MemoryBank::init_from_lengths(
            &lengths,
            cfg.encoder.embedding_dim,
            cfg.train.bank_mode,
            derive_seed(seed, "bank", &[]),
        )?;
        bank.set_update_rate(cfg.train.bank_update_rate)?;
        bank.round_to_f32();
        let mut encoder = Encoder::new(cfg.encoder.clone(), derive_seed(seed, "encoder", &[]))?;
        let pool = worker_pool(cfg.train.workers)?;
        let projections = calibrate(&mut encoder, &videos, &pool)?;
        if cfg.train.bank_warm_start {
            warm_start(&mut bank, &encoder, &videos, &projections)?;
        }
        let opt = Sgd::new(encoder.params(), cfg.train.lr, cfg.train.momentum);
        let z = match cfg.loss.z_estimate {
            ZEstimate::Fixed(z) => Some(z),
            ZEstimate::Auto => None,
        };
        Self::assemble(cfg, videos, dataset_ids, encoder, opt, bank, lengths, z, 0)
    }

    /// Continues a run from `ckpt`; `videos` must be the full dataset the
    /// checkpoint's training positions refer to.
    pub fn from_checkpoint(ckpt: &Checkpoint, videos: &'a [VideoSequence]) -> Result<Self> {
        let subset = ckpt
            .training_videos
            .iter()
            .map(|&i| {
                videos
                    .get(i)
                    .ok_or_else(|| TceError::Checkpoint(format!("checkpoint refers to missing video {i}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let lengths: Vec<usize> = subset.iter().map(|v| v.len()).collect();
        if lengths != ckpt.bank_lengths {
            return Err(TceError::Checkpoint("dataset does not match the checkpoint's bank layout".into()));
        }
        let encoder = ckpt.build_encoder()?;
        let mut opt = Sgd::new(encoder.params(), ckpt.config.train.lr, ckpt.config.train.momentum);
        opt.velocity = ckpt.velocity.clone();
        Self::assemble(
            ckpt.config.clone(),
            subset,
            ckpt.training_videos.clone(),
            encoder,
            opt,
            ckpt.bank.clone(),
            lengths,
            ckpt.z_estimate,
            ckpt.epoch,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        cfg: PretrainConfig,
        videos: Vec<&'a VideoSequence>,
        dataset_ids: Vec<usize>,
        encoder: Encoder,
        opt: Sgd,
        bank: MemoryBank,
        lengths: Vec<usize>,
        z: Option<f64>,
        epoch: usize,
    ) -> Result<Self> {
        if videos.len() != dataset_ids.len() {
            return Err(TceError::arg("video list and dataset ids differ in length"));
        }
        let index = DatasetIndex::from_lengths(&lengths)?;
        if cfg.loss.second_order_weight > 0.0 {
            if let Some(v) = videos.iter().find(|v| v.len() < 3) {
                return Err(TceError::Config(format!(
                    "second-order loss needs videos of at least 3 frames, found {}",
                    v.len()
                )));
            }
        }
        for v in &videos {
            encoder.check_input(v.frame(0)).map_err(|e| TceError::Config(e.to_string()))?;
        }
        let n1 = clip_negatives(&cfg, &bank)?;
        let pool = worker_pool(cfg.train.workers)?;
        Ok(Trainer {
            schedule: cfg.schedule(),
            cfg,
            videos,
            dataset_ids,
            index,
            encoder,
            opt,
            bank,
            bank_lengths: lengths,
            n1,
            z,
            epoch,
            steps: 0,
            events: Vec::new(),
            pool,
        })
    }

    pub fn config(&self) -> &PretrainConfig {
        &self.cfg
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn bank(&self) -> &MemoryBank {
        &self.bank
    }

    pub fn optimizer(&self) -> &Sgd {
        &self.opt
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Effective N₁ after clipping to the bank.
    pub fn negatives_per_anchor(&self) -> usize {
        self.n1
    }

    pub fn z_estimate(&self) -> Option<f64> {
        self.z
    }

    pub fn events(&self) -> &[StepEvent] {
        &self.events
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            config: self.cfg.clone(),
            encoder: self.encoder.params().to_vec(),
            buffers: self.encoder.buffers().to_vec(),
            velocity: self.opt.velocity.clone(),
            bank: self.bank.clone(),
            bank_lengths: self.bank_lengths.clone(),
            z_estimate: self.z,
            training_videos: self.dataset_ids.clone(),
        }
    }

    /// The anchor pairs of the upcoming epoch, in training order.
    pub fn epoch_pairs(&self) -> Vec<AnchorPair> {
        let seed = self.cfg.train.seed;
        let e = self.epoch as u64;
        let mut pairs = enumerate_anchor_pairs(
            &self.index,
            self.cfg.train.anchor_mode,
            derive_seed(seed, "anchor-pairs", &[e]),
        );
        pairs.shuffle(&mut derive_rng(seed, "shuffle", &[e]));
        pairs
    }

    fn view(&self, video: usize, frame: usize, view: u64) -> Result<crate::image::Image> {
        let mut rng = derive_rng(
            self.cfg.train.seed,
            "augment",
            &[self.epoch as u64, self.dataset_ids[video] as u64, frame as u64, view],
        );
        augment(self.videos[video].frame(frame), &self.cfg.augment, &mut rng)
    }

    fn sample_rng(&self, component: &str, pair: &AnchorPair) -> crate::rng::Rng {
        derive_rng(
            self.cfg.train.seed,
            component,
            &[
                self.epoch as u64,
                self.dataset_ids[pair.anchor.video_id] as u64,
                pair.anchor.frame_index as u64,
            ],
        )
    }

    fn first_order_negatives(&self, pair: &AnchorPair, anchor: &[f64], radius: f64) -> Result<Vec<BankKey>> {
        let mut rng = self.sample_rng("negatives", pair);
        let v = pair.anchor.video_id;
        if self.schedule.enabled {
            select_negatives(&self.bank, anchor, v, self.n1, radius, &mut rng)
        } else {
            self.bank.sample_uniform_negatives(v, self.n1, &mut rng)
        }
    }

    /// Monte-Carlo partition estimate `K · mean(e^{s/τ})` over the batch's
    /// negatives.
    fn estimate_z(&self, batch: &[AnchorPair], radius: f64) -> Result<f64> {
        let tau = self.cfg.loss.temperature;
        let sums = self.pool.install(|| {
            batch
                .par_iter()
                .map(|pair| {
                    let anchor = self.encoder.embed(&self.view(pair.anchor.video_id, pair.anchor.frame_index, 0)?)?;
                    let keys = self.first_order_negatives(pair, &anchor, radius)?;
                    let mut s = 0.0;
                    for k in &keys {
                        s += (dot(&anchor, self.bank.get(*k)?) / tau).exp();
                    }
                    Ok((s, keys.len()))
                })
                .collect::<Result<Vec<_>>>()
        })?;
        let (total, count) = sums.iter().fold((0.0, 0usize), |(a, n), (s, c)| (a + s, n + c));
        Ok(self.bank.len() as f64 * total / count as f64)
    }

    fn wants_next(&self, pair: &AnchorPair) -> bool {
        let len = self.videos[pair.anchor.video_id].len();
        self.cfg.loss.second_order_weight > 0.0 && pair.anchor.frame_index + 2 < len && len > 3
    }

    fn views(&self, pair: &AnchorPair) -> Result<Views> {
        let (v, t) = (pair.anchor.video_id, pair.anchor.frame_index);
        let anchor_img = self.view(v, t, 0)?;
        let anchor = self.encoder.raw_forward(&anchor_img)?;
        let positive = self.encoder.raw_forward(&self.view(v, pair.positive.frame_index, 1)?)?;
        let next = if self.wants_next(pair) {
            Some(self.encoder.raw_forward(&self.view(v, t + 2, 2)?)?)
        } else {
            None
        };
        Ok(Views {
            anchor_img,
            anchor,
            positive,
            next,
        })
    }

    fn sample_loss(
        &self,
        pair: &AnchorPair,
        anchor_img: &Image,
        passes: &[EmbeddingPass],
        radius: f64,
    ) -> Result<SampleLoss> {
        let loss_cfg = &self.cfg.loss;
        let tau = loss_cfg.temperature;
        let (v, t) = (pair.anchor.video_id, pair.anchor.frame_index);
        let a = passes[0].embedding.as_slice();
        let p = passes[1].embedding.as_slice();

        let keys = self.first_order_negatives(pair, a, radius)?;
        let negatives = keys.iter().map(|&k| self.bank.get(k)).collect::<Result<Vec<_>>>()?;
        let first = match loss_cfg.nce_mode {
            NceMode::ExactSoftmax => first_order_loss(a, p, &negatives, tau)?,
            NceMode::Nce => {
                let z = self.z.ok_or_else(|| TceError::Config("NCE partition estimate missing".into()))?;
                nce_loss(a, p, &negatives, tau, self.bank.len(), z)?
            }
        };

        let mut second = None;
        let mut skipped = false;
        if loss_cfg.second_order_weight > 0.0 && t + 2 < self.videos[v].len() {
            match passes.get(2) {
                Some(next) => {
                    let len = self.videos[v].len();
                    let base = self.bank.video_keys(v).start;
                    let candidates: Vec<usize> = (0..len).filter(|&j| j < t || j > t + 2).collect();
                    let n2 = loss_cfg.within_video_negatives.min(candidates.len());
                    let mut rng = self.sample_rng("within-video-negatives", pair);
                    let within = rand::seq::index::sample(&mut rng, candidates.len(), n2)
                        .into_iter()
                        .map(|i| self.bank.get(BankKey(base + candidates[i])))
                        .collect::<Result<Vec<_>>>()?;
                    match second_order_loss(a, p, &next.embedding, &within, tau) {
                        Ok(r) => second = Some(r),
                        Err(TceError::DegenerateSegment) => skipped = true,
                        Err(e) => return Err(e),
                    }
                }
                // no within-video candidates outside the segment
                None => skipped = true,
            }
        }

        let mut aux = None;
        let mut rot_pass = None;
        if loss_cfg.aux_weight > 0.0 {
            let k = self.sample_rng("rotation", pair).random_range(0..4);
            let rotated = rotate90(anchor_img, k)?;
            let pass = self.encoder.rotation_forward(&rotated)?;
            aux = Some(rotation_aux_loss(&pass.logits, Rotation::from_quarter_turns(k))?);
            rot_pass = Some(pass);
        }

        let total: LossResult = combined_loss(&first, second.as_ref(), aux.as_ref(), loss_cfg)?;
        if !total.is_finite() {
            return Err(TceError::NonFinite(format!(
                "loss at video {} frame {t}",
                self.dataset_ids[v]
            )));
        }
        let grad = |s: Slot| total.grad(s).map(<[f64]>::to_vec);
        Ok(SampleLoss {
            loss: total.value,
            d_anchor: grad(Slot::Anchor),
            d_positive: grad(Slot::Positive),
            d_next: grad(Slot::Next),
            rotation: rot_pass.zip(grad(Slot::Logits)),
            second_order_skipped: skipped,
        })
    }

    /// Loss and mean gradient of `batch` against the current bank, without
    /// changing any state.
    ///
    /// Projections are standardised with statistics of the whole batch, so a
    /// step runs in phases: per-sample forward passes, batch statistics,
    /// per-sample losses, the batch-coupled standardisation backward, then
    /// per-sample backward passes. Reductions run in batch order, so results
    /// do not depend on the worker count.
    pub fn evaluate_batch(&self, batch: &[AnchorPair], radius: f64) -> Result<BatchResult> {
        if batch.is_empty() {
            return Err(TceError::arg("empty batch"));
        }
        let views = self
            .pool
            .install(|| batch.par_iter().map(|p| self.views(p)).collect::<Result<Vec<_>>>())?;

        let mut images = Vec::with_capacity(batch.len());
        let mut counts = Vec::with_capacity(batch.len());
        let mut raws = Vec::with_capacity(3 * batch.len());
        for v in views {
            images.push(v.anchor_img);
            counts.push(2 + usize::from(v.next.is_some()));
            raws.push(v.anchor);
            raws.push(v.positive);
            raws.extend(v.next);
        }
        let (flat, _) = self.encoder.forward_batch(raws)?;
        let mut groups: Vec<Vec<EmbeddingPass>> = Vec::with_capacity(batch.len());
        let mut rest = flat.into_iter();
        for &c in &counts {
            groups.push(rest.by_ref().take(c).collect());
        }

        let losses = self.pool.install(|| {
            batch
                .par_iter()
                .zip(&images)
                .zip(&groups)
                .map(|((pair, img), passes)| self.sample_loss(pair, img, passes, radius))
                .collect::<Result<Vec<_>>>()
        })?;

        let all: Vec<&EmbeddingPass> = groups.iter().flatten().collect();
        let d_emb: Vec<Option<&[f64]>> = losses
            .iter()
            .zip(&counts)
            .flat_map(|(l, &c)| {
                [l.d_anchor.as_deref(), l.d_positive.as_deref(), l.d_next.as_deref()]
                    .into_iter()
                    .take(c)
            })
            .collect();
        let d_raw = self.encoder.standardise_backward(&all, &d_emb, true);
        let mut d_groups: Vec<&[Vec<f64>]> = Vec::with_capacity(batch.len());
        let mut offset = 0;
        for &c in &counts {
            d_groups.push(&d_raw[offset..offset + c]);
            offset += c;
        }

        let sample_grads = self.pool.install(|| {
            groups
                .par_iter()
                .zip(&d_groups)
                .zip(&losses)
                .map(|((passes, d), l)| {
                    let mut g = zero_grads(self.encoder.params());
                    for (pass, d) in passes.iter().zip(d.iter()) {
                        self.encoder.projection_backward(pass, d, &mut g);
                    }
                    if let Some((pass, d_logits)) = &l.rotation {
                        self.encoder.rotation_backward(pass, d_logits, &mut g);
                    }
                    g
                })
                .collect::<Vec<_>>()
        });

        let mut grads = zero_grads(self.encoder.params());
        let scale = 1.0 / batch.len() as f64;
        for g in &sample_grads {
            for (acc, g) in grads.iter_mut().zip(g) {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += scale * b;
                }
            }
        }
        let mut writes = Vec::with_capacity(batch.len());
        for (pair, passes) in batch.iter().zip(&groups) {
            let anchor_key = self.bank.key_for(pair.anchor)?;
            let positive_key = self.bank.key_for(pair.positive)?;
            // Positive first so that a per-video bank ends with the anchor.
            writes.push([
                (positive_key, passes[1].embedding.clone()),
                (anchor_key, passes[0].embedding.clone()),
            ]);
        }
        Ok(BatchResult {
            mean_loss: losses.iter().map(|l| l.loss).sum::<f64>() * scale,
            grads,
            writes,
            second_order_skipped: losses.iter().filter(|l| l.second_order_skipped).count(),
        })
    }

    /// One SGD step with the learning rate of the current epoch.
    pub fn apply_gradient(&mut self, result: &BatchResult) -> Result<()> {
        self.opt.lr = self.cfg.train.lr_at(self.epoch);
        self.opt.step(self.encoder.params_mut(), &result.grads, None)
    }

    pub fn write_bank(&mut self, result: &BatchResult) -> Result<()> {
        for pair in &result.writes {
            for (key, emb) in pair {
                let stored = self.bank.update(*key, emb)?.to_f32_precision();
                self.bank.set(*key, stored)?;
            }
        }
        Ok(())
    }

    /// Read, update, write, in that order. Returns the batch's mean loss.
    pub fn step(&mut self, batch: &[AnchorPair], radius: f64) -> Result<f64> {
        if self.z.is_none() && self.cfg.loss.nce_mode == NceMode::Nce {
            let z = self.estimate_z(batch, radius)?;
            info!("estimated NCE partition Z = {z}");
            self.z = Some(z);
        }
        let step = self.steps;
        self.events.push(StepEvent::BankRead { step });
        let result = self.evaluate_batch(batch, radius)?;
        self.apply_gradient(&result)?;
        self.events.push(StepEvent::GradientUpdate { step });
        self.write_bank(&result)?;
        self.events.push(StepEvent::BankWrite { step });
        self.steps += 1;
        if result.second_order_skipped > 0 {
            debug!("step {step}: second-order term skipped for {} samples", result.second_order_skipped);
        }
        Ok(result.mean_loss)
    }

    /// Trains one epoch; returns the mean per-sample loss.
    pub fn run_epoch(&mut self) -> Result<f64> {
        if self.epoch >= self.cfg.train.epochs {
            return Err(TceError::Config(format!("all {} epochs already trained", self.cfg.train.epochs)));
        }
        let pairs = self.epoch_pairs();
        let batch = self.cfg.train.batch_size;
        let steps = pairs.len().div_ceil(batch);
        let mut total = 0.0;
        for (s, chunk) in pairs.chunks(batch).enumerate() {
            let progress = self.epoch as f64 + s as f64 / steps as f64;
            let radius = self.schedule.radius(progress)?;
            total += self.step(chunk, radius)? * chunk.len() as f64;
        }
        calibrate(&mut self.encoder, &self.videos, &self.pool)?;
        self.epoch += 1;
        Ok(total / pairs.len() as f64)
    }

    /// `r(t)` at the current epoch boundary.
    pub fn radius_now(&self) -> Result<f64> {
        self.schedule.radius(self.epoch as f64)
    }
}

/// A labelled in-memory dataset.
#[derive(Debug, Clone, Copy)]
pub struct PretrainData<'a> {
    pub videos: &'a [VideoSequence],
    pub labels: &'a [Option<usize>],
}

impl PretrainData<'_> {
    fn refs(&self, ids: &[usize]) -> Vec<VideoRef<'_>> {
        ids.iter()
            .map(|&i| VideoRef {
                video_id: i,
                video: &self.videos[i],
                label: self.labels[i],
            })
            .collect()
    }
}

pub struct PretrainOutcome {
    pub checkpoint: Checkpoint,
    /// Row 0 describes the initialisation.
    pub metrics: Vec<EpochMetrics>,
    pub final_coherency: CoherencyReport,
}

/// Checkpoint file name for a completed epoch.
pub fn checkpoint_file(epoch: usize) -> String {
    format!("epoch_{epoch:03}.tce")
}

pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.tce";
pub const COHERENCY_FILE: &str = "coherency.tsv";

struct Outputs {
    dir: Option<PathBuf>,
}

impl Outputs {
    fn new(dir: Option<&Path>) -> Result<Self> {
        if let Some(d) = dir {
            let ck = d.join(CHECKPOINT_DIR);
            std::fs::create_dir_all(&ck).map_err(|e| TceError::io(&ck, e))?;
        }
        Ok(Outputs {
            dir: dir.map(Path::to_path_buf),
        })
    }

    fn epoch_done(&self, ckpt: &Checkpoint, metrics: &[EpochMetrics]) -> Result<()> {
        let Some(dir) = &self.dir else { return Ok(()) };
        ckpt.save(&dir.join(CHECKPOINT_DIR).join(checkpoint_file(ckpt.epoch)))?;
        metrics::write(&dir.join(METRICS_FILE), metrics)
    }
}

fn coherency(trainer: &Trainer<'_>, data: &PretrainData<'_>, held_out: &[usize]) -> Result<CoherencyReport> {
    let refs = data.refs(held_out);
    let count = match trainer.cfg.train.coherency_videos {
        0 => refs.len(),
        n => n,
    };
    trainer
        .pool
        .install(|| coherency_report(trainer.encoder(), &refs, count, derive_seed(trainer.cfg.train.seed, "coherency", &[])))
}

fn run(
    mut trainer: Trainer<'_>,
    data: &PretrainData<'_>,
    held_out: &[usize],
    out_dir: Option<&Path>,
    mut metrics: Vec<EpochMetrics>,
) -> Result<PretrainOutcome> {
    let outputs = Outputs::new(out_dir)?;
    let mut report = coherency(&trainer, data, held_out)?;
    if metrics.is_empty() && trainer.epoch == 0 {
        let row = EpochMetrics {
            epoch: trainer.epoch,
            mean_loss: f64::NAN,
            lr: trainer.cfg.train.lr_at(trainer.epoch),
            r_t: trainer.radius_now()?,
            mean_tac: report.mean_tac,
            mean_mac: report.mean_mac,
        };
        info!("{}", row.describe());
        metrics.push(row);
        outputs.epoch_done(&trainer.checkpoint(), &metrics)?;
    }
    while trainer.epoch < trainer.cfg.train.epochs {
        let lr = trainer.cfg.train.lr_at(trainer.epoch);
        let mean_loss = trainer.run_epoch()?;
        report = coherency(&trainer, data, held_out)?;
        let row = EpochMetrics {
            epoch: trainer.epoch,
            mean_loss,
            lr,
            r_t: trainer.radius_now()?,
            mean_tac: report.mean_tac,
            mean_mac: report.mean_mac,
        };
        info!("{}", row.describe());
        metrics.push(row);
        outputs.epoch_done(&trainer.checkpoint(), &metrics)?;
    }
    let checkpoint = trainer.checkpoint();
    if let Some(dir) = out_dir {
        checkpoint.save(&dir.join(FINAL_CHECKPOINT))?;
        report.write_tsv(&dir.join(COHERENCY_FILE))?;
    }
    Ok(PretrainOutcome {
        checkpoint,
        metrics,
        final_coherency: report,
    })
}

fn held_out_ids(data: &PretrainData<'_>, cfg: &PretrainConfig) -> Result<(Vec<usize>, Vec<usize>)> {
    if data.videos.len() != data.labels.len() {
        return Err(TceError::arg("videos and labels differ in length"));
    }
    let split = split_videos(data.labels, cfg.train.held_out_fraction, cfg.train.seed)?;
    let eval = if split.held_out.is_empty() {
        split.train.clone()
    } else {
        split.held_out
    };
    Ok((split.train, eval))
}

/// Full pretraining run from a fresh initialisation. With `out_dir`, writes
/// `metrics.tsv`, `checkpoints/epoch_XXX.tce` (epoch 0 is the
/// initialisation), `final.tce` and the final per-video `coherency.tsv`.
pub fn pretrain(data: &PretrainData<'_>, cfg: &PretrainConfig, out_dir: Option<&Path>) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let (train, held_out) = held_out_ids(data, cfg)?;
    info!("pretraining on {} videos, {} held out for metrics", train.len(), held_out.len());
    let videos = train.iter().map(|&i| &data.videos[i]).collect();
    let trainer = Trainer::new(cfg.clone(), videos, train)?;
    run(trainer, data, &held_out, out_dir, Vec::new())
}

/// Continues from `ckpt` up to the configured epoch count. `previous` holds
/// the metrics rows already written for the run.
pub fn resume(
    data: &PretrainData<'_>,
    ckpt: &Checkpoint,
    previous: Vec<EpochMetrics>,
    out_dir: Option<&Path>,
) -> Result<PretrainOutcome> {
    let (_, held_out) = held_out_ids(data, &ckpt.config)?;
    let trainer = Trainer::from_checkpoint(ckpt, data.videos)?;
    run(trainer, data, &held_out, out_dir, previous)
}
