use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Result, TceError};
use crate::index::VideoSequence;
use crate::nn::Encoder;
use crate::trainer::Checkpoint;

pub const TCEB_MAGIC: &[u8; 4] = b"TCEB";

/// Row-major `f32` tensor: magic, `u32` rank, `rank × u32` dims, values.
pub fn write_tceb(path: &Path, dims: &[usize], values: &[f32]) -> Result<()> {
    if dims.iter().product::<usize>() != values.len() {
        return Err(TceError::arg(format!("{} values do not fill dims {dims:?}", values.len())));
    }
    let mut out = Vec::with_capacity(8 + 4 * dims.len() + 4 * values.len());
    out.extend_from_slice(TCEB_MAGIC);
    let to_u32 = |n: usize| u32::try_from(n).map_err(|_| TceError::arg("tensor dimension exceeds u32"));
    out.extend_from_slice(&to_u32(dims.len())?.to_le_bytes());
    for &d in dims {
        out.extend_from_slice(&to_u32(d)?.to_le_bytes());
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, out).map_err(|e| TceError::io(path, e))
}

pub fn read_tceb(path: &Path) -> Result<(Vec<usize>, Vec<f32>)> {
    let bytes = std::fs::read(path).map_err(|e| TceError::io(path, e))?;
    let bad = |m: &str| TceError::Dataset(format!("{}: {m}", path.display()));
    if bytes.len() < 8 || &bytes[..4] != TCEB_MAGIC {
        return Err(bad("not a TCEB tensor"));
    }
    let word = |i: usize| -> Result<usize> {
        bytes
            .get(i..i + 4)
            .map(|b| u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
            .ok_or_else(|| bad("truncated header"))
    };
    let rank = word(4)?;
    let dims = (0..rank).map(|i| word(8 + 4 * i)).collect::<Result<Vec<_>>>()?;
    let start = 8 + 4 * rank;
    let n: usize = dims.iter().product();
    if bytes.len() != start + 4 * n {
        return Err(bad("payload size does not match dims"));
    }
    let values = bytes[start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    Ok((dims, values))
}

/// Embeds every frame of `video` and writes `out` (tab-separated rows of
/// frame index then the `D` values) plus a `.tceb` twin of shape `T × D`.
/// Returns the binary path.
pub fn export_embeddings(ckpt: &Checkpoint, video: &VideoSequence, out: &Path) -> Result<PathBuf> {
    export_with_encoder(&ckpt.build_encoder()?, video, out)
}

pub fn export_with_encoder(encoder: &Encoder, video: &VideoSequence, out: &Path) -> Result<PathBuf> {
    let dim = encoder.config().embedding_dim;
    let mut values: Vec<f32> = Vec::with_capacity(video.len() * dim);
    let mut text = String::new();
    for (t, frame) in video.frames().iter().enumerate() {
        let e = encoder.embed(frame)?;
        let _ = write!(text, "{t}");
        for &v in e.iter() {
            let v = v as f32;
            values.push(v);
            let _ = write!(text, "\t{v}");
        }
        text.push('\n');
    }
    std::fs::write(out, text).map_err(|e| TceError::io(out, e))?;
    let bin = out.with_extension("tceb");
    write_tceb(&bin, &[video.len(), dim], &values)?;
    Ok(bin)
}
