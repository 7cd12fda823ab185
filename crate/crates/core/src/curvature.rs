//! Turning-angle curvature of embedded frame trajectories.
//!
//! For points `x_1..x_T` the turn at interior point `i` is the angle between
//! the incoming step `x_i - x_{i-1}` and the outgoing step `x_{i+1} - x_i`.
//! Total absolute curvature (TAC) sums those turns, maximum absolute
//! curvature (MAC) takes the largest. Straighter trajectories score lower.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embedding::l2_norm;
use crate::error::{Result, TceError};
use crate::image::Image;
use crate::index::VideoSequence;
use crate::rng::derive_rng;

/// Steps shorter than this are treated as zero length.
pub const SEGMENT_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    points: Vec<Vec<f64>>,
}

impl Trajectory {
    pub fn new(points: Vec<Vec<f64>>) -> Result<Self> {
        if points.len() < 3 {
            return Err(TceError::arg(format!(
                "a trajectory needs at least 3 points, got {}",
                points.len()
            )));
        }
        let d = points[0].len();
        if d == 0 {
            return Err(TceError::arg("trajectory points must be non-empty"));
        }
        if let Some(p) = points.iter().find(|p| p.len() != d) {
            return Err(TceError::DimensionMismatch {
                expected: d,
                got: p.len(),
            });
        }
        Ok(Trajectory { points })
    }

    pub fn points(&self) -> &[Vec<f64>] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Interior turn angles, in `[0, π]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnAngles {
    /// One angle per interior point whose two adjacent steps are both
    /// non-degenerate.
    pub angles: Vec<f64>,
    /// Interior points skipped because a neighbouring step had zero length.
    pub skipped: usize,
}

pub fn turn_angles(traj: &Trajectory) -> TurnAngles {
    let steps: Vec<Vec<f64>> = traj
        .points
        .windows(2)
        .map(|w| w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect())
        .collect();
    let norms: Vec<f64> = steps.iter().map(|s| l2_norm(s)).collect();
    let mut angles = Vec::with_capacity(steps.len() - 1);
    let mut skipped = 0;
    for i in 0..steps.len() - 1 {
        if !(norms[i] > SEGMENT_EPS && norms[i + 1] > SEGMENT_EPS) {
            skipped += 1;
            continue;
        }
        angles.push(angle_between(&steps[i], norms[i], &steps[i + 1], norms[i + 1]));
    }
    TurnAngles { angles, skipped }
}

/// `arccos(<a,b> / (|a||b|))`, evaluated as `2 atan2(|â - b̂|, |â + b̂|)` on
/// the unit directions. Same angle, but accurate near 0 and π where the
/// arccos of a clamped cosine loses half its digits.
fn angle_between(a: &[f64], na: f64, b: &[f64], nb: f64) -> f64 {
    let (mut diff, mut sum) = (0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (u, v) = (x / na, y / nb);
        diff += (u - v) * (u - v);
        sum += (u + v) * (u + v);
    }
    2.0 * diff.sqrt().atan2(sum.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Curvature {
    /// Radians.
    pub value: f64,
    /// Set when zero-length steps forced some turns to be skipped (they
    /// contribute 0).
    pub warning: bool,
}

pub fn tac(traj: &Trajectory) -> Curvature {
    let t = turn_angles(traj);
    Curvature {
        value: t.angles.iter().fold(0.0, |a, b| a + b),
        warning: t.skipped > 0,
    }
}

pub fn mac(traj: &Trajectory) -> Curvature {
    let t = turn_angles(traj);
    Curvature {
        value: t.angles.iter().copied().fold(0.0, f64::max),
        warning: t.skipped > 0,
    }
}

/// Anything that maps a frame to an embedding vector.
pub trait FrameEncoder: Sync {
    fn embed_frame(&self, frame: &Image) -> Result<Vec<f64>>;
}

impl<F> FrameEncoder for F
where
    F: Fn(&Image) -> Result<Vec<f64>> + Sync,
{
    fn embed_frame(&self, frame: &Image) -> Result<Vec<f64>> {
        self(frame)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VideoRef<'a> {
    pub video_id: usize,
    pub video: &'a VideoSequence,
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoCurvature {
    pub video_id: usize,
    pub frames: usize,
    pub tac: f64,
    pub mac: f64,
    pub warning: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoherencyReport {
    pub mean_tac: f64,
    pub mean_mac: f64,
    pub per_video: Vec<VideoCurvature>,
}

impl CoherencyReport {
    /// Tab-separated, header `video_id T TAC MAC`, one row per video.
    pub fn to_tsv(&self) -> String {
        let mut s = String::from("video_id\tT\tTAC\tMAC\n");
        for v in &self.per_video {
            let _ = writeln!(s, "{}\t{}\t{}\t{}", v.video_id, v.frames, v.tac, v.mac);
        }
        s
    }

    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_tsv()).map_err(|e| TceError::io(path, e))
    }
}

/// Chooses up to `count` videos. With labels, classes are visited
/// round-robin (each class's videos in seeded random order) so the sample is
/// spread evenly over classes; otherwise a seeded uniform subset is taken.
/// Returned positions are sorted.
pub fn sample_videos_evenly(labels: &[Option<usize>], count: usize, seed: u64) -> Vec<usize> {
    let mut rng = derive_rng(seed, "coherency-sample", &[]);
    let mut chosen = if labels.iter().all(Option::is_some) && !labels.is_empty() {
        let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            by_class.entry(l.unwrap()).or_default().push(i);
        }
        let mut queues: Vec<std::vec::IntoIter<usize>> = by_class
            .into_values()
            .map(|mut v| {
                v.shuffle(&mut rng);
                v.into_iter()
            })
            .collect();
        let mut out = Vec::new();
        while out.len() < count {
            let before = out.len();
            for q in queues.iter_mut() {
                if out.len() == count {
                    break;
                }
                if let Some(i) = q.next() {
                    out.push(i);
                }
            }
            if out.len() == before {
                break;
            }
        }
        out
    } else {
        let mut all: Vec<usize> = (0..labels.len()).collect();
        all.shuffle(&mut rng);
        all.truncate(count);
        all
    };
    chosen.sort_unstable();
    chosen
}

/// Embeds every frame of the sampled videos and reports per-video and mean
/// TAC/MAC. Videos are weighted equally in the means.
pub fn coherency_report<E: FrameEncoder + ?Sized>(
    encoder: &E,
    videos: &[VideoRef<'_>],
    sample_count: usize,
    seed: u64,
) -> Result<CoherencyReport> {
    if videos.is_empty() || sample_count == 0 {
        return Err(TceError::arg("coherency report needs at least one video"));
    }
    let labels: Vec<Option<usize>> = videos.iter().map(|v| v.label).collect();
    let chosen = sample_videos_evenly(&labels, sample_count, seed);

    let per_video = chosen
        .par_iter()
        .map(|&i| {
            let v = &videos[i];
            if v.video.len() < 3 {
                return Err(TceError::arg(format!(
                    "video {} has {} frames; curvature needs at least 3",
                    v.video_id,
                    v.video.len()
                )));
            }
            let points = v
                .video
                .frames()
                .iter()
                .map(|f| encoder.embed_frame(f))
                .collect::<Result<Vec<_>>>()?;
            let traj = Trajectory::new(points)?;
            let turns = turn_angles(&traj);
            Ok(VideoCurvature {
                video_id: v.video_id,
                frames: traj.len(),
                tac: turns.angles.iter().fold(0.0, |a, b| a + b),
                mac: turns.angles.iter().copied().fold(0.0, f64::max),
                warning: turns.skipped > 0,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_video.len() as f64;
    Ok(CoherencyReport {
        mean_tac: per_video.iter().map(|v| v.tac).sum::<f64>() / n,
        mean_mac: per_video.iter().map(|v| v.mac).sum::<f64>() / n,
        per_video,
    })
}
