#![allow(dead_code)]

use tce_core::data::synthetic::{plan_video, render_video};
use tce_core::data::SyntheticSpec;
use tce_core::nn::EncoderConfig;
use tce_core::trainer::PretrainConfig;
use tce_core::VideoSequence;

/// Renders a synthetic dataset in memory.
pub fn videos(spec: &SyntheticSpec) -> (Vec<VideoSequence>, Vec<Option<usize>>) {
    let mut videos = Vec::new();
    let mut labels = Vec::new();
    for v in 0..spec.num_videos() {
        let plan = plan_video(spec, v);
        labels.push(Some(plan.label));
        videos.push(VideoSequence::new(render_video(spec, &plan)).unwrap());
    }
    (videos, labels)
}

pub fn tiny_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_classes: 4,
        videos_per_class: 3,
        frames_per_video: 8,
        image_size: 16,
        seed,
        ..SyntheticSpec::default()
    }
}

/// A configuration small enough for sub-second epochs.
pub fn tiny_config(seed: u64) -> PretrainConfig {
    let mut cfg = PretrainConfig::default();
    cfg.encoder = EncoderConfig {
        widths: vec![4, 8],
        embedding_dim: 8,
        input_size: 16,
        ..EncoderConfig::default()
    };
    cfg.train.epochs = 3;
    cfg.train.lr_decay_epoch = 2;
    cfg.train.batch_size = 10;
    cfg.train.held_out_fraction = 0.25;
    cfg.train.seed = seed;
    cfg.loss.temperature = 0.1;
    cfg.loss.within_video_negatives = 3;
    cfg
}
