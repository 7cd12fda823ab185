//! Videos, frame references and the global dataset enumeration.

use std::path::PathBuf;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TceError};
use crate::image::Image;
use crate::rng::derive_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct FrameRef {
    pub video_id: usize,
    pub frame_index: usize,
}

impl FrameRef {
    pub fn new(video_id: usize, frame_index: usize) -> Self {
        FrameRef {
            video_id,
            frame_index,
        }
    }
}

/// An ordered run of `T >= 2` equally sized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSequence {
    frames: Vec<Image>,
}

impl VideoSequence {
    pub fn new(frames: Vec<Image>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(TceError::Dataset(format!(
                "a video needs at least 2 frames, got {}",
                frames.len()
            )));
        }
        let shape = frames[0].shape();
        if let Some(bad) = frames.iter().position(|f| f.shape() != shape) {
            return Err(TceError::Dataset(format!(
                "frame {bad} has shape {:?}, expected {:?}",
                frames[bad].shape(),
                shape
            )));
        }
        Ok(VideoSequence { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn frames(&self) -> &[Image] {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> &Image {
        &self.frames[t]
    }

    /// `(channels, height, width)` shared by every frame.
    pub fn frame_shape(&self) -> (usize, usize, usize) {
        self.frames[0].shape()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video_id: usize,
    pub length: usize,
    /// Directory of the video's frame files, relative to the dataset root.
    pub dir: String,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    root: PathBuf,
    videos: Vec<VideoEntry>,
}

impl DatasetIndex {
    /// Validates that ids run `0..n` in order and every video has `T >= 2`.
    pub fn new(root: impl Into<PathBuf>, videos: Vec<VideoEntry>) -> Result<Self> {
        if videos.is_empty() {
            return Err(TceError::Dataset("dataset contains no videos".into()));
        }
        for (i, v) in videos.iter().enumerate() {
            if v.video_id != i {
                return Err(TceError::Dataset(format!(
                    "video ids must be contiguous from 0; position {i} has id {}",
                    v.video_id
                )));
            }
            if v.length < 2 {
                return Err(TceError::Dataset(format!(
                    "video {} ({}) has {} frame(s); at least 2 required",
                    v.video_id, v.dir, v.length
                )));
            }
        }
        Ok(DatasetIndex {
            root: root.into(),
            videos,
        })
    }

    /// Builds an in-memory index from video lengths (no storage behind it).
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        let videos = lengths
            .iter()
            .enumerate()
            .map(|(i, &length)| VideoEntry {
                video_id: i,
                length,
                dir: format!("video_{i:05}"),
                label: None,
            })
            .collect();
        DatasetIndex::new(PathBuf::new(), videos)
    }

    pub fn root(&self) -> &std::path::Path {
        &self.root
    }

    pub fn videos(&self) -> &[VideoEntry] {
        &self.videos
    }

    pub fn num_videos(&self) -> usize {
        self.videos.len()
    }

    pub fn video(&self, id: usize) -> &VideoEntry {
        &self.videos[id]
    }

    pub fn total_frames(&self) -> usize {
        self.videos.iter().map(|v| v.length).sum()
    }

    pub fn label(&self, id: usize) -> Option<usize> {
        self.videos[id].label
    }

    pub fn num_classes(&self) -> Option<usize> {
        let labels: Option<Vec<usize>> = self.videos.iter().map(|v| v.label).collect();
        labels.map(|l| l.into_iter().max().map_or(0, |m| m + 1))
    }

    pub fn video_dir(&self, id: usize) -> PathBuf {
        self.root.join(&self.videos[id].dir)
    }

    pub fn contains(&self, f: FrameRef) -> bool {
        f.video_id < self.videos.len() && f.frame_index < self.videos[f.video_id].length
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorMode {
    /// Every frame `t in 0..T-1` anchors once, paired with `t + 1`.
    EveryFrame,
    /// One uniformly drawn anchor per video.
    OnePerVideo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AnchorPair {
    pub anchor: FrameRef,
    pub positive: FrameRef,
}

/// Lists the (anchor, positive) pairs of one epoch. The last frame of a
/// video only ever appears as a positive.
pub fn enumerate_anchor_pairs(index: &DatasetIndex, mode: AnchorMode, seed: u64) -> Vec<AnchorPair> {
    let pair = |v: usize, t: usize| AnchorPair {
        anchor: FrameRef::new(v, t),
        positive: FrameRef::new(v, t + 1),
    };
    match mode {
        AnchorMode::EveryFrame => index
            .videos()
            .iter()
            .flat_map(|v| (0..v.length - 1).map(move |t| pair(v.video_id, t)))
            .collect(),
        AnchorMode::OnePerVideo => {
            let mut rng = derive_rng(seed, "anchor-pairs", &[]);
            index
                .videos()
                .iter()
                .map(|v| pair(v.video_id, rng.random_range(0..v.length - 1)))
                .collect()
        }
    }
}
