//! Per-view augmentation: random crop, horizontal flip, greyscale and colour
//! jitter, in that order, each value clamped to `[0, 1]`.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Result, TceError};
use crate::image::Image;
use crate::rng::Rng;

/// ITU-R BT.601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentationConfig {
    pub enabled: bool,
    /// Resize so the shorter side has this many pixels before cropping
    /// (bilinear); 0 disables the stage.
    pub resize_short_side: usize,
    /// Output crop side; 0 keeps the frame size.
    pub crop_size: usize,
    /// Zero padding added on every side before cropping.
    pub crop_padding: usize,
    pub flip_prob: f64,
    pub grey_prob: f64,
    /// Probability of applying colour jitter at all.
    pub jitter_prob: f64,
    /// Factors are drawn from `[1 - δ, 1 + δ]`.
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        AugmentationConfig {
            enabled: true,
            resize_short_side: 0,
            crop_size: 0,
            crop_padding: 4,
            flip_prob: 0.5,
            grey_prob: 0.2,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
        }
    }
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        AugmentationConfig {
            enabled: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("grey_prob", self.grey_prob),
            ("jitter_prob", self.jitter_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(TceError::Config(format!("augment.{name} must be in [0, 1], got {p}")));
            }
        }
        for (name, d) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&d) {
                return Err(TceError::Config(format!("augment.{name} must be in [0, 1], got {d}")));
            }
        }
        Ok(())
    }
}

fn luminance(img: &Image, y: usize, x: usize) -> f64 {
    (0..3).map(|c| LUMA[c] * img.get(c, y, x)).sum()
}

pub fn to_greyscale(img: &Image) -> Image {
    let mut out = img.clone();
    for y in 0..img.height() {
        for x in 0..img.width() {
            let l = luminance(img, y, x);
            for c in 0..3 {
                out.set(c, y, x, l);
            }
        }
    }
    out
}

pub fn flip_horizontal(img: &Image) -> Image {
    let mut out = img.clone();
    let w = img.width();
    for c in 0..img.channels() {
        for y in 0..img.height() {
            for x in 0..w {
                out.set(c, y, x, img.get(c, y, w - 1 - x));
            }
        }
    }
    out
}

/// Bilinear resize so that the shorter side becomes `short`.
pub fn resize_short_side(img: &Image, short: usize) -> Image {
    let (c, h, w) = img.shape();
    if h.min(w) == short {
        return img.clone();
    }
    let scale = short as f64 / h.min(w) as f64;
    let (nh, nw) = (((h as f64) * scale).round().max(1.0) as usize, ((w as f64) * scale).round().max(1.0) as usize);
    let mut out = Image::zeros(c, nh, nw);
    let src = |o: usize, n: usize, m: usize| ((o as f64 + 0.5) * m as f64 / n as f64 - 0.5).clamp(0.0, (m - 1) as f64);
    for y in 0..nh {
        let fy = src(y, nh, h);
        let (y0, ty) = (fy.floor() as usize, fy - fy.floor());
        let y1 = (y0 + 1).min(h - 1);
        for x in 0..nw {
            let fx = src(x, nw, w);
            let (x0, tx) = (fx.floor() as usize, fx - fx.floor());
            let x1 = (x0 + 1).min(w - 1);
            for ch in 0..c {
                let top = img.get(ch, y0, x0) * (1.0 - tx) + img.get(ch, y0, x1) * tx;
                let bot = img.get(ch, y1, x0) * (1.0 - tx) + img.get(ch, y1, x1) * tx;
                out.set(ch, y, x, top * (1.0 - ty) + bot * ty);
            }
        }
    }
    out
}

fn crop(img: &Image, size: usize, padding: usize, rng: &mut Rng) -> Result<Image> {
    let (c, h, w) = img.shape();
    if size > h || size > w {
        return Err(TceError::arg(format!("crop {size} larger than frame {h}x{w}")));
    }
    let (ph, pw) = (h + 2 * padding, w + 2 * padding);
    let oy = rng.random_range(0..=ph - size);
    let ox = rng.random_range(0..=pw - size);
    let mut out = Image::zeros(c, size, size);
    for ch in 0..c {
        for y in 0..size {
            let sy = (oy + y) as isize - padding as isize;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            for x in 0..size {
                let sx = (ox + x) as isize - padding as isize;
                if sx >= 0 && sx < w as isize {
                    out.set(ch, y, x, img.get(ch, sy as usize, sx as usize));
                }
            }
        }
    }
    Ok(out)
}

fn factor(delta: f64, rng: &mut Rng) -> f64 {
    if delta == 0.0 {
        1.0
    } else {
        rng.random_range(1.0 - delta..=1.0 + delta)
    }
}

fn jitter(img: &mut Image, cfg: &AugmentationConfig, rng: &mut Rng) {
    let b = factor(cfg.brightness, rng);
    let k = factor(cfg.contrast, rng);
    let s = factor(cfg.saturation, rng);
    for v in img.data_mut() {
        *v = (*v * b).clamp(0.0, 1.0);
    }
    let (h, w) = (img.height(), img.width());
    let mean = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .map(|(y, x)| luminance(img, y, x))
        .sum::<f64>()
        / (h * w) as f64;
    for v in img.data_mut() {
        *v = ((*v - mean) * k + mean).clamp(0.0, 1.0);
    }
    for y in 0..h {
        for x in 0..w {
            let l = luminance(img, y, x);
            for c in 0..3 {
                let v = img.get(c, y, x);
                img.set(c, y, x, (l + (v - l) * s).clamp(0.0, 1.0));
            }
        }
    }
}

/// Applies the configured augmentations. Random draws happen in a fixed
/// order (crop offsets, flip, grey, jitter gate, three jitter factors), so
/// the output is a pure function of the frame and the rng state.
pub fn augment(frame: &Image, cfg: &AugmentationConfig, rng: &mut Rng) -> Result<Image> {
    if !cfg.enabled {
        return Ok(frame.clone());
    }
    if frame.channels() != 3 {
        return Err(TceError::arg(format!(
            "augmentation expects RGB frames, got {} channels",
            frame.channels()
        )));
    }
    let mut img = if cfg.resize_short_side > 0 {
        resize_short_side(frame, cfg.resize_short_side)
    } else {
        frame.clone()
    };
    let size = if cfg.crop_size == 0 { img.height().min(img.width()) } else { cfg.crop_size };
    img = crop(&img, size, cfg.crop_padding, rng)?;
    if rng.random_bool(cfg.flip_prob) {
        img = flip_horizontal(&img);
    }
    if rng.random_bool(cfg.grey_prob) {
        img = to_greyscale(&img);
    }
    if rng.random_bool(cfg.jitter_prob) {
        jitter(&mut img, cfg, rng);
    }
    for v in img.data_mut() {
        *v = v.clamp(0.0, 1.0);
    }
    Ok(img)
}
