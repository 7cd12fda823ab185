//! Synthetic moving-shape videos.
//!
//! Each video shows one bright shape over a dark background. The class picks
//! the motion pattern; shape kind, colour, size and the motion's parameters
//! are drawn per video. Everything is a deterministic function of the seed
//! and the video id.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::dataset::{write_manifest, ManifestRow, FRAME_FILE_PREFIX};
use super::ppm;
use crate::error::{Result, TceError};
use crate::image::Image;
use crate::index::{DatasetIndex, VideoEntry};
use crate::rng::derive_rng;

/// Largest shape-centre displacement between consecutive frames, in pixels.
pub const MAX_STEP: f64 = 2.0;

/// Largest shape radius, in pixels (at the default 32 px frame size).
const MAX_RADIUS: f64 = 5.0;
const MIN_RADIUS: f64 = 3.0;

/// Supersampling grid per pixel axis when rasterizing shapes.
const SUPERSAMPLE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotionPattern {
    LinearDrift,
    CircularOrbit,
    Oscillation,
    Spiral,
}

impl MotionPattern {
    pub const ALL: [MotionPattern; 4] = [
        MotionPattern::LinearDrift,
        MotionPattern::CircularOrbit,
        MotionPattern::Oscillation,
        MotionPattern::Spiral,
    ];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeKind {
    Disk,
    Square,
    Diamond,
    Cross,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 4] = [ShapeKind::Disk, ShapeKind::Square, ShapeKind::Diamond, ShapeKind::Cross];

    /// Whether offset `(dx, dy)` from the centre lies inside a shape of
    /// radius `r`.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            ShapeKind::Disk => dx * dx + dy * dy <= r * r,
            ShapeKind::Square => dx.abs().max(dy.abs()) <= 0.85 * r,
            ShapeKind::Diamond => dx.abs() + dy.abs() <= 1.2 * r,
            ShapeKind::Cross => {
                let (ax, ay) = (dx.abs(), dy.abs());
                (ax <= r / 3.0 && ay <= r) || (ay <= r / 3.0 && ax <= r)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShapeChoice {
    /// Drawn uniformly per video.
    #[default]
    Random,
    /// Fixed per class: class `c` draws `ShapeKind::ALL[c]`.
    ByClass,
    Disk,
    Square,
    Diamond,
    Cross,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    /// Number of motion classes, 1..=4.
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub frames_per_video: usize,
    /// Frames are `image_size x image_size`.
    pub image_size: usize,
    pub channels: usize,
    pub shape: ShapeChoice,
    /// Standard deviation of additive Gaussian pixel noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            num_classes: 4,
            videos_per_class: 10,
            frames_per_video: 30,
            image_size: 32,
            channels: 3,
            shape: ShapeChoice::Random,
            noise_sigma: 0.02,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TceError::Config(m));
        if !(1..=4).contains(&self.num_classes) {
            return bad(format!("synth.num_classes must be in 1..=4, got {}", self.num_classes));
        }
        if self.videos_per_class == 0 {
            return bad("synth.videos_per_class must be >= 1".into());
        }
        if self.frames_per_video < 6 {
            return bad(format!(
                "synth.frames_per_video must be >= 6, got {}",
                self.frames_per_video
            ));
        }
        if self.image_size < 8 {
            return bad(format!("synth.image_size must be >= 8, got {}", self.image_size));
        }
        if self.channels != 3 {
            return bad(format!("synth.channels must be 3 (RGB), got {}", self.channels));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return bad(format!("synth.noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        Ok(())
    }

    pub fn num_videos(&self) -> usize {
        self.num_classes * self.videos_per_class
    }
}

/// Everything needed to render one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoPlan {
    pub video_id: usize,
    pub label: usize,
    pub pattern: MotionPattern,
    pub shape: ShapeKind,
    pub radius: f64,
    pub color: [f64; 3],
    pub background: [f64; 3],
    motion: Motion,
}

#[derive(Debug, Clone, PartialEq)]
enum Motion {
    Linear { start: [f64; 2], velocity: [f64; 2] },
    Orbit { centre: [f64; 2], radius: f64, phase: f64, omega: f64 },
    Oscillation { centre: [f64; 2], dir: [f64; 2], amplitude: f64, phase: f64, omega: f64 },
    Spiral { centre: [f64; 2], r_start: f64, r_end: f64, phase: f64, omega: f64, frames: f64 },
}

impl VideoPlan {
    /// Shape centre `(x, y)` at frame `t`.
    pub fn centre(&self, t: usize) -> [f64; 2] {
        let t = t as f64;
        match self.motion {
            Motion::Linear { start, velocity } => [start[0] + velocity[0] * t, start[1] + velocity[1] * t],
            Motion::Orbit { centre, radius, phase, omega } => {
                let a = phase + omega * t;
                [centre[0] + radius * a.cos(), centre[1] + radius * a.sin()]
            }
            Motion::Oscillation { centre, dir, amplitude, phase, omega } => {
                let s = amplitude * (phase + omega * t).sin();
                [centre[0] + s * dir[0], centre[1] + s * dir[1]]
            }
            Motion::Spiral { centre, r_start, r_end, phase, omega, frames } => {
                let r = r_start + (r_end - r_start) * t / (frames - 1.0);
                let a = phase + omega * t;
                [centre[0] + r * a.cos(), centre[1] + r * a.sin()]
            }
        }
    }

    /// Constant per-frame velocity of a linear-drift video.
    pub fn velocity(&self) -> Option<[f64; 2]> {
        match self.motion {
            Motion::Linear { velocity, .. } => Some(velocity),
            _ => None,
        }
    }
}

/// Derives the plan of video `video_id`; classes are assigned in blocks of
/// `videos_per_class`.
pub fn plan_video(spec: &SyntheticSpec, video_id: usize) -> VideoPlan {
    let mut rng = derive_rng(spec.seed, "synthetic-plan", &[video_id as u64]);
    let label = video_id / spec.videos_per_class;
    let pattern = MotionPattern::ALL[label];
    let size = spec.image_size as f64;
    let scale = size / 32.0;
    // drawn in every mode so the remaining attributes do not depend on it
    let drawn = ShapeKind::ALL[rng.random_range(0..4)];
    let shape = match spec.shape {
        ShapeChoice::Random => drawn,
        ShapeChoice::ByClass => ShapeKind::ALL[label],
        ShapeChoice::Disk => ShapeKind::Disk,
        ShapeChoice::Square => ShapeKind::Square,
        ShapeChoice::Diamond => ShapeKind::Diamond,
        ShapeChoice::Cross => ShapeKind::Cross,
    };
    let radius = rng.random_range(MIN_RADIUS..=MAX_RADIUS) * scale;
    let color = [
        rng.random_range(0.5..=1.0),
        rng.random_range(0.5..=1.0),
        rng.random_range(0.5..=1.0),
    ];
    let bg = rng.random_range(0.0..=0.15);
    let background = [bg, bg, bg];

    let mid = [(size - 1.0) / 2.0, (size - 1.0) / 2.0];
    // The shape stays fully inside the frame.
    let room = (size - 1.0) / 2.0 - radius - 1.0;
    let frames = spec.frames_per_video as f64;
    let max_step = MAX_STEP.min(room);
    let mut jitter = |amount: f64| rng.random_range(-amount..=amount);

    let motion = match pattern {
        MotionPattern::LinearDrift => {
            let heading = jitter(PI);
            let span = 2.0 * room * (0.6 + 0.4 * jitter(1.0).abs());
            let speed = (span / (frames - 1.0)).min(max_step);
            let velocity = [speed * heading.cos(), speed * heading.sin()];
            let half = [velocity[0] * (frames - 1.0) / 2.0, velocity[1] * (frames - 1.0) / 2.0];
            let slack = [
                (room - half[0].abs()).max(0.0),
                (room - half[1].abs()).max(0.0),
            ];
            let start = [
                mid[0] - half[0] + jitter(slack[0]),
                mid[1] - half[1] + jitter(slack[1]),
            ];
            Motion::Linear { start, velocity }
        }
        MotionPattern::CircularOrbit => {
            let r = room * (0.55 + 0.35 * jitter(1.0).abs());
            let slack = room - r;
            let omega = (0.12 + 0.08 * jitter(1.0).abs()).min(max_step / r) * jitter(1.0).signum();
            Motion::Orbit {
                centre: [mid[0] + jitter(slack), mid[1] + jitter(slack)],
                radius: r,
                phase: jitter(PI),
                omega,
            }
        }
        MotionPattern::Oscillation => {
            let a = jitter(PI);
            let amplitude = room * (0.6 + 0.4 * jitter(1.0).abs());
            let omega = (0.3 + 0.15 * jitter(1.0).abs()).min(max_step / amplitude);
            let dir = [a.cos(), a.sin()];
            let slack = room - amplitude;
            Motion::Oscillation {
                centre: [mid[0] + jitter(slack) * dir[1].abs(), mid[1] + jitter(slack) * dir[0].abs()],
                dir,
                amplitude,
                phase: jitter(PI),
                omega,
            }
        }
        MotionPattern::Spiral => {
            let r_end = room * (0.8 + 0.2 * jitter(1.0).abs());
            let r_start = room * 0.1;
            let omega = (0.25 + 0.1 * jitter(1.0).abs()).min(max_step / (2.0 * r_end)) * jitter(1.0).signum();
            Motion::Spiral {
                centre: mid,
                r_start,
                r_end,
                phase: jitter(PI),
                omega,
                frames,
            }
        }
    };
    VideoPlan {
        video_id,
        label,
        pattern,
        shape,
        radius,
        color,
        background,
        motion,
    }
}

/// Noise-free rendering of `plan`'s shape centred at `centre`, before 8-bit
/// quantization.
pub fn render_shape(plan: &VideoPlan, centre: [f64; 2], size: usize) -> Image {
    let mut img = Image::zeros(3, size, size);
    let step = 1.0 / SUPERSAMPLE as f64;
    let samples = (SUPERSAMPLE * SUPERSAMPLE) as f64;
    let reach = plan.radius * 1.25 + 1.0;
    for y in 0..size {
        for x in 0..size {
            let mut coverage = 0.0;
            if (x as f64 - centre[0]).abs() <= reach && (y as f64 - centre[1]).abs() <= reach {
                let mut hits = 0usize;
                for sy in 0..SUPERSAMPLE {
                    for sx in 0..SUPERSAMPLE {
                        let px = x as f64 - 0.5 + (sx as f64 + 0.5) * step;
                        let py = y as f64 - 0.5 + (sy as f64 + 0.5) * step;
                        if plan.shape.contains(px - centre[0], py - centre[1], plan.radius) {
                            hits += 1;
                        }
                    }
                }
                coverage = hits as f64 / samples;
            }
            for c in 0..3 {
                img.set(c, y, x, plan.background[c] + coverage * (plan.color[c] - plan.background[c]));
            }
        }
    }
    img
}

/// Frames of one video exactly as they are written to disk (noise added,
/// clamped, quantized to 8 bits).
pub fn render_video(spec: &SyntheticSpec, plan: &VideoPlan) -> Vec<Image> {
    let normal = Normal::new(0.0, spec.noise_sigma.max(0.0)).expect("sigma validated");
    (0..spec.frames_per_video)
        .map(|t| {
            let mut img = render_shape(plan, plan.centre(t), spec.image_size);
            if spec.noise_sigma > 0.0 {
                let mut rng = derive_rng(spec.seed, "synthetic-noise", &[plan.video_id as u64, t as u64]);
                for v in img.data_mut() {
                    *v += normal.sample(&mut rng);
                }
            }
            img.map(ppm::quantize)
        })
        .collect()
}

/// Renders every video of `spec` under `out` and writes the manifest.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<DatasetIndex> {
    spec.validate()?;
    std::fs::create_dir_all(out).map_err(|e| TceError::io(out, e))?;
    let entries: Vec<VideoEntry> = (0..spec.num_videos())
        .into_par_iter()
        .map(|v| {
            let plan = plan_video(spec, v);
            let dir_name = format!("video_{v:05}");
            let dir = out.join(&dir_name);
            std::fs::create_dir_all(&dir).map_err(|e| TceError::io(&dir, e))?;
            for (t, frame) in render_video(spec, &plan).iter().enumerate() {
                ppm::write(&dir.join(format!("{FRAME_FILE_PREFIX}{t:05}.ppm")), frame)?;
            }
            Ok(VideoEntry {
                video_id: v,
                length: spec.frames_per_video,
                dir: dir_name,
                label: Some(plan.label),
            })
        })
        .collect::<Result<_>>()?;
    let rows: Vec<ManifestRow> = entries
        .iter()
        .map(|e| ManifestRow {
            dir: e.dir.clone(),
            label: e.label,
            num_frames: e.length,
        })
        .collect();
    write_manifest(out, &rows)?;
    DatasetIndex::new(out, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> SyntheticSpec {
        SyntheticSpec {
            videos_per_class: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn plans_are_deterministic_and_labelled_in_blocks() {
        let s = spec();
        for v in 0..s.num_videos() {
            let p = plan_video(&s, v);
            assert_eq!(p, plan_video(&s, v));
            assert_eq!(p.label, v / 3);
            assert_eq!(p.pattern, MotionPattern::ALL[p.label]);
        }
    }

    #[test]
    fn motion_is_smooth_and_in_frame() {
        for seed in 0..20 {
            let s = SyntheticSpec { seed, ..spec() };
            for v in 0..s.num_videos() {
                let p = plan_video(&s, v);
                for t in 0..s.frames_per_video {
                    let c = p.centre(t);
                    for k in c {
                        assert!(k - p.radius >= -0.5 && k + p.radius <= 31.5, "seed {seed} video {v} t {t}: {c:?}");
                    }
                    if t > 0 {
                        let q = p.centre(t - 1);
                        let d = ((c[0] - q[0]).powi(2) + (c[1] - q[1]).powi(2)).sqrt();
                        assert!(d <= MAX_STEP + 1e-9, "{:?} step {d}", p.pattern);
                        assert!(d > 0.0);
                    }
                }
            }
        }
    }

    #[test]
    fn adjacent_frames_differ_in_bounded_pixel_count() {
        let s = SyntheticSpec { noise_sigma: 0.0, ..spec() };
        // Shape extent is at most 2 * 1.25 * MAX_RADIUS + 2 px across; a
        // step of MAX_STEP touches at most that many rows/columns twice.
        let extent = (2.0 * 1.25 * MAX_RADIUS + 2.0).ceil() as usize;
        let bound = 2 * extent * (MAX_STEP.ceil() as usize + 2);
        for v in 0..s.num_videos() {
            let frames = render_video(&s, &plan_video(&s, v));
            for w in frames.windows(2) {
                let changed = (0..32 * 32)
                    .filter(|&i| (0..3).any(|c| w[0].data()[c * 1024 + i] != w[1].data()[c * 1024 + i]))
                    .count();
                assert!(changed <= bound, "video {v}: {changed} > {bound}");
            }
        }
    }

    #[test]
    fn linear_drift_translates_by_velocity() {
        let s = SyntheticSpec { noise_sigma: 0.0, ..spec() };
        let plan = plan_video(&s, 0);
        let v = plan.velocity().unwrap();
        let frames = render_video(&s, &plan);
        for t in 0..s.frames_per_video - 1 {
            // Independent re-render: start from frame t's centre, shift by v.
            let c = plan.centre(t);
            let shifted = render_shape(&plan, [c[0] + v[0], c[1] + v[1]], 32).map(ppm::quantize);
            let max_diff = shifted
                .data()
                .iter()
                .zip(frames[t + 1].data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            // Identical up to floating-point placement of edge samples.
            assert!(max_diff <= 1.0 / 255.0 + 1e-12, "t {t}: {max_diff}");
        }
    }

    #[test]
    fn validation() {
        assert!(SyntheticSpec::default().validate().is_ok());
        for bad in [
            SyntheticSpec { frames_per_video: 5, ..spec() },
            SyntheticSpec { image_size: 7, ..spec() },
            SyntheticSpec { num_classes: 5, ..spec() },
            SyntheticSpec { channels: 1, ..spec() },
            SyntheticSpec { noise_sigma: -1.0, ..spec() },
        ] {
            assert!(bad.validate().is_err());
        }
    }
}
