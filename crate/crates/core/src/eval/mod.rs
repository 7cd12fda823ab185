//! Downstream evaluation: linear probing or fine-tuning a classifier built
//! on a pretrained trunk, averaged multi-sample inference, and embedding
//! export.

mod classifier;
pub mod export;

use log::info;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use classifier::{build_classifier, inflate_first_layer, Classifier};
pub use export::{export_embeddings, read_tceb, write_tceb};

use crate::data::augment::{augment, AugmentationConfig};
use crate::data::split::{split_videos, Split};
use crate::data::transforms::{stack_of_differences, STACK_FRAMES};
use crate::error::{Result, TceError};
use crate::image::Image;
use crate::index::VideoSequence;
use crate::losses::{softmax, softmax_cross_entropy};
use crate::nn::{zero_grads, BatchStats, Param, Sgd};
use crate::rng::{derive_rng, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EvalMode {
    /// Only the new head trains; the trunk stays frozen.
    LinearProbe,
    FineTune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InputMode {
    Rgb,
    StackOfDifferences,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub mode: EvalMode,
    pub input_mode: InputMode,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    /// Epochs from this (0-based) index on run at `lr · lr_decay`.
    pub lr_decay_epoch: usize,
    pub lr_decay: f64,
    /// Dropout on the pooled features feeding the head.
    pub dropout: f64,
    /// Training samples per video; their features are averaged.
    pub segments: usize,
    /// Inference samples per video; their softmax outputs are averaged.
    pub samples: usize,
    /// Allow tiling an RGB first layer to 15 channels for stack input.
    pub inflate: bool,
    /// Apply the run's augmentation to training samples.
    pub augment: bool,
    pub held_out_fraction: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            mode: EvalMode::FineTune,
            input_mode: InputMode::Rgb,
            epochs: 30,
            lr: 0.05,
            momentum: 0.9,
            batch_size: 8,
            lr_decay_epoch: 375,
            lr_decay: 0.1,
            dropout: 0.0,
            segments: 3,
            samples: 19,
            inflate: true,
            augment: true,
            held_out_fraction: 0.2,
            seed: 0,
            workers: 1,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(TceError::Config("eval.epochs must be >= 1".into()));
        }
        if self.samples == 0 || self.segments == 0 {
            return Err(TceError::Config("eval.samples and eval.segments must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TceError::Config(format!("eval.lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(TceError::Config(format!("eval.momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(TceError::Config(format!("eval.lr_decay must be in (0, 1], got {}", self.lr_decay)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TceError::Config(format!("eval.dropout must be in [0, 1), got {}", self.dropout)));
        }
        if self.batch_size == 0 || self.workers == 0 {
            return Err(TceError::Config("eval.batch_size and eval.workers must be >= 1".into()));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_decay_epoch {
            self.lr * self.lr_decay
        } else {
            self.lr
        }
    }

    /// Frames one input consumes.
    fn span(&self) -> usize {
        match self.input_mode {
            InputMode::Rgb => 1,
            InputMode::StackOfDifferences => STACK_FRAMES,
        }
    }
}

/// Evenly spaced sample positions `⌊i·(T-1)/(S-1)⌋`, `i = 0..S`. With
/// `S = 1` the single sample is frame 0; short videos repeat indices.
pub fn sample_indices(len: usize, samples: usize) -> Vec<usize> {
    if samples <= 1 || len <= 1 {
        return vec![0; samples];
    }
    (0..samples).map(|i| i * (len - 1) / (samples - 1)).collect()
}

fn build_input(video: &VideoSequence, start: usize, mode: InputMode, aug: Option<(&AugmentationConfig, &Rng)>) -> Result<Image> {
    let prep = |f: &Image| -> Result<Image> {
        match aug {
            // every frame of a stack sees the same augmentation draws
            Some((cfg, rng)) => augment(f, cfg, &mut rng.clone()),
            None => Ok(f.clone()),
        }
    };
    match mode {
        InputMode::Rgb => prep(video.frame(start)),
        InputMode::StackOfDifferences => {
            let frames = video.frames()[start..start + STACK_FRAMES]
                .iter()
                .map(prep)
                .collect::<Result<Vec<_>>>()?;
            stack_of_differences(&frames)
        }
    }
}

/// Predicted class and the averaged class distribution of one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPrediction {
    pub class: usize,
    pub distribution: Vec<f64>,
}

/// Averages per-sample softmax outputs over `config.samples` evenly spaced
/// frames (RGB) or six-frame blocks (stack mode, clamped to fit); ties in
/// the argmax go to the lowest class id.
pub fn evaluate_video(classifier: &Classifier, video: &VideoSequence, config: &EvalConfig) -> Result<VideoPrediction> {
    let span = config.span();
    if video.len() < span {
        return Err(TceError::arg(format!(
            "video of {} frames is too short for {:?} input (needs {span})",
            video.len(),
            config.input_mode
        )));
    }
    let mut dist = vec![0.0; classifier.num_classes()];
    for idx in sample_indices(video.len(), config.samples) {
        let start = idx.min(video.len() - span);
        let input = build_input(video, start, config.input_mode, None)?;
        let probs = softmax(&classifier.logits(&classifier.features(&input)?));
        for (d, p) in dist.iter_mut().zip(probs) {
            *d += p;
        }
    }
    let s = config.samples as f64;
    dist.iter_mut().for_each(|d| *d /= s);
    let mut class = 0;
    for (i, &p) in dist.iter().enumerate() {
        if p > dist[class] {
            class = i;
        }
    }
    Ok(VideoPrediction {
        class,
        distribution: dist,
    })
}

/// Top-1 accuracy over the videos at `ids`.
pub fn top1(classifier: &Classifier, videos: &[VideoSequence], labels: &[usize], ids: &[usize], config: &EvalConfig) -> Result<f64> {
    if ids.is_empty() {
        return Err(TceError::arg("top-1 over an empty split"));
    }
    let pool = pool(config)?;
    let hits = pool.install(|| {
        ids.par_iter()
            .map(|&i| Ok(usize::from(evaluate_video(classifier, &videos[i], config)?.class == labels[i])))
            .collect::<Result<Vec<usize>>>()
    })?;
    Ok(hits.iter().sum::<usize>() as f64 / ids.len() as f64)
}

fn pool(config: &EvalConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(config.workers)
        .build()
        .map_err(|e| TceError::Config(format!("cannot start worker pool: {e}")))
}

/// A labelled in-memory dataset.
#[derive(Debug, Clone, Copy)]
pub struct LabeledData<'a> {
    pub videos: &'a [VideoSequence],
    pub labels: &'a [usize],
}

impl LabeledData<'_> {
    pub fn split(&self, config: &EvalConfig) -> Result<Split> {
        let labels: Vec<Option<usize>> = self.labels.iter().map(|&l| Some(l)).collect();
        split_videos(&labels, config.held_out_fraction, config.seed)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochEval {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_top1: f64,
}

pub struct FinetuneOutcome {
    /// Weights from the best validation epoch.
    pub classifier: Classifier,
    pub best_top1: f64,
    /// 1-based epoch that produced `classifier`.
    pub best_epoch: usize,
    pub history: Vec<EpochEval>,
}

struct SampleGrad {
    loss: f64,
    grads: Vec<Vec<f64>>,
}

fn train_sample(
    clf: &Classifier,
    video: &VideoSequence,
    label: usize,
    config: &EvalConfig,
    aug: &AugmentationConfig,
    rng_root: (u64, u64, u64),
) -> Result<SampleGrad> {
    let (seed, epoch, vid) = rng_root;
    let mut rng = derive_rng(seed, "finetune-segments", &[epoch, vid]);
    let span = config.span();
    let starts = video.len() - span + 1;
    let segs = config.segments;
    let mut feats = Vec::with_capacity(segs);
    let mut caches = Vec::with_capacity(segs);
    for k in 0..segs {
        // segment k covers starts [k·n/S, (k+1)·n/S), never empty
        let lo = k * starts / segs;
        let hi = ((k + 1) * starts / segs).max(lo + 1).min(starts);
        let start = rng.random_range(lo.min(starts - 1)..hi);
        let aug_rng = derive_rng(seed, "finetune-augment", &[epoch, vid, k as u64]);
        let input = build_input(
            video,
            start,
            config.input_mode,
            config.augment.then_some((aug, &aug_rng)),
        )?;
        let (f, cache) = clf.features_with_cache(&input)?;
        feats.push(f);
        caches.push(cache);
    }
    let dim = feats[0].len();
    let mut mean = vec![0.0; dim];
    for f in &feats {
        for (m, v) in mean.iter_mut().zip(f) {
            *m += v / segs as f64;
        }
    }
    let z = clf.standardise(&mean);
    let keep = 1.0 - config.dropout;
    let mask: Vec<f64> = (0..dim)
        .map(|_| {
            if config.dropout == 0.0 || rng.random_bool(keep) {
                1.0 / keep
            } else {
                0.0
            }
        })
        .collect();
    let dropped: Vec<f64> = z.iter().zip(&mask).map(|(a, b)| a * b).collect();
    let (loss, dlogits) = softmax_cross_entropy(&clf.head(&dropped), label)?;
    let mut grads = zero_grads(clf.params());
    let dfeat = clf.head_backward(&dropped, &dlogits, &mut grads);
    if clf.trainable()[0] {
        let dseg: Vec<f64> = dfeat.iter().zip(&mask).map(|(g, m)| g * m / segs as f64).collect();
        for cache in &caches {
            clf.trunk_backward(cache, &dseg, &mut grads);
        }
    }
    Ok(SampleGrad { loss, grads })
}

/// Per-dimension mean and variance of the un-augmented features at the
/// inference sample positions of `ids`.
fn feature_stats(
    clf: &Classifier,
    videos: &[VideoSequence],
    ids: &[usize],
    config: &EvalConfig,
    pool: &rayon::ThreadPool,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let span = config.span();
    let per_video = pool.install(|| {
        ids.par_iter()
            .map(|&i| {
                let video = &videos[i];
                sample_indices(video.len(), config.samples)
                    .into_iter()
                    .map(|idx| clf.features(&build_input(video, idx.min(video.len() - span), config.input_mode, None)?))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<&[f64]> = per_video.iter().flatten().map(Vec::as_slice).collect();
    let stats = BatchStats::of(&rows)?;
    Ok((stats.mean, stats.var))
}

/// Trains `classifier` on the training split with segment sampling and
/// feature averaging, scoring the held-out split after every epoch, and
/// returns the best-scoring weights (earliest epoch on ties). The head's
/// input standardisation is measured on the training split first.
pub fn finetune(
    mut classifier: Classifier,
    data: &LabeledData<'_>,
    config: &EvalConfig,
    aug: &AugmentationConfig,
) -> Result<FinetuneOutcome> {
    config.validate()?;
    aug.validate()?;
    if data.videos.len() != data.labels.len() {
        return Err(TceError::arg("videos and labels differ in length"));
    }
    let split = data.split(config)?;
    for c in 0..classifier.num_classes() {
        if !split.train.iter().any(|&i| data.labels[i] == c) {
            return Err(TceError::Dataset(format!("class {c} has no training videos")));
        }
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= classifier.num_classes()) {
        return Err(TceError::Dataset(format!(
            "label {bad} out of range for {} classes",
            classifier.num_classes()
        )));
    }
    let min_len = match config.input_mode {
        InputMode::Rgb => config.segments,
        InputMode::StackOfDifferences => STACK_FRAMES,
    };
    if let Some(v) = data.videos.iter().find(|v| v.len() < min_len) {
        return Err(TceError::Dataset(format!(
            "video of {} frames is shorter than the {min_len} frames needed",
            v.len()
        )));
    }
    let eval_ids = if split.held_out.is_empty() { &split.train } else { &split.held_out };
    let pool = pool(config)?;
    let (mean, var) = feature_stats(&classifier, data.videos, &split.train, config, &pool)?;
    classifier.set_feature_stats(&mean, &var)?;
    let trainable = classifier.trainable().to_vec();
    let mut opt = Sgd::new(classifier.params(), config.lr, config.momentum);
    let mut best: Option<(f64, usize, Vec<Param>)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        opt.lr = config.lr_at(epoch);
        let mut order = split.train.clone();
        order.shuffle(&mut derive_rng(config.seed, "finetune-shuffle", &[epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(config.batch_size) {
            let clf = &classifier;
            let samples = pool.install(|| {
                batch
                    .par_iter()
                    .map(|&i| {
                        train_sample(
                            clf,
                            &data.videos[i],
                            data.labels[i],
                            config,
                            aug,
                            (config.seed, epoch as u64, i as u64),
                        )
                    })
                    .collect::<Result<Vec<_>>>()
            })?;
            let scale = 1.0 / batch.len() as f64;
            let mut grads = zero_grads(classifier.params());
            for s in samples {
                total += s.loss;
                for (acc, g) in grads.iter_mut().zip(&s.grads) {
                    for (a, b) in acc.iter_mut().zip(g) {
                        *a += scale * b;
                    }
                }
            }
            opt.step(classifier.params_mut(), &grads, Some(&trainable))?;
        }
        let val = top1(&classifier, data.videos, data.labels, eval_ids, config)?;
        let row = EpochEval {
            epoch: epoch + 1,
            train_loss: total / order.len() as f64,
            val_top1: val,
        };
        info!("finetune epoch {}: loss {:.4} top-1 {:.3}", row.epoch, row.train_loss, row.val_top1);
        history.push(row);
        if best.as_ref().is_none_or(|(b, _, _)| val > *b) {
            best = Some((val, epoch + 1, classifier.params().to_vec()));
        }
    }
    let (best_top1, best_epoch, params) = best.expect("at least one epoch");
    classifier.params_mut().clone_from_slice(&params);
    Ok(FinetuneOutcome {
        classifier,
        best_top1,
        best_epoch,
        history,
    })
}
