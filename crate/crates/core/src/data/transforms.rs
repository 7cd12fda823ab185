use crate::error::{Result, TceError};
use crate::image::Image;

/// Rotates a square image counter-clockwise by `k` quarter turns.
pub fn rotate90(img: &Image, k: usize) -> Result<Image> {
    let (c, h, w) = img.shape();
    if h != w {
        return Err(TceError::arg(format!("rotate90 needs a square image, got {h}x{w}")));
    }
    let k = k % 4;
    if k == 0 {
        return Ok(img.clone());
    }
    let n = h;
    let mut out = Image::zeros(c, n, n);
    for ch in 0..c {
        for y in 0..n {
            for x in 0..n {
                // output (y, x) samples the source pixel that lands there
                let (sy, sx) = match k {
                    1 => (x, n - 1 - y),
                    2 => (n - 1 - y, n - 1 - x),
                    _ => (n - 1 - x, y),
                };
                out.set(ch, y, x, img.get(ch, sy, sx));
            }
        }
    }
    Ok(out)
}

/// Number of frames consumed by [`stack_of_differences`].
pub const STACK_FRAMES: usize = 6;

/// Five channel-wise differences of six consecutive RGB frames:
/// channel block `j` holds `frame[j+1] - frame[j]`, giving 15 channels.
pub fn stack_of_differences(frames: &[Image]) -> Result<Image> {
    if frames.len() != STACK_FRAMES {
        return Err(TceError::arg(format!(
            "stack of differences needs exactly {STACK_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    let (c, h, w) = frames[0].shape();
    if c != 3 {
        return Err(TceError::arg(format!("stack of differences needs RGB frames, got {c} channels")));
    }
    if let Some(f) = frames.iter().find(|f| f.shape() != (c, h, w)) {
        return Err(TceError::arg(format!(
            "frame shape {:?} differs from {:?}",
            f.shape(),
            (c, h, w)
        )));
    }
    let plane = c * h * w;
    let mut data = Vec::with_capacity((STACK_FRAMES - 1) * plane);
    for pair in frames.windows(2) {
        data.extend(pair[1].data().iter().zip(pair[0].data()).map(|(b, a)| b - a));
    }
    Image::new((STACK_FRAMES - 1) * c, h, w, data)
}
