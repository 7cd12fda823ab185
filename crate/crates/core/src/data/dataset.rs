//! On-disk dataset layout:
//!
//! ```text
//! <root>/manifest.tsv                 video_dir <TAB> label <TAB> num_frames
//! <root>/<video_dir>/frame_00000.ppm  binary P6, 8-bit
//! ```
//!
//! The manifest is UTF-8 with a one-line header; an unlabeled video has
//! `-` in the label column. Without a manifest every subdirectory holding
//! frame files is taken as an unlabeled video.

use std::path::Path;

use rayon::prelude::*;

use super::ppm;
use crate::error::{Result, TceError};
use crate::index::{DatasetIndex, VideoEntry, VideoSequence};

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const MANIFEST_HEADER: &str = "video_dir\tlabel\tnum_frames";
pub const FRAME_FILE_PREFIX: &str = "frame_";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestRow {
    pub dir: String,
    pub label: Option<usize>,
    pub num_frames: usize,
}

pub fn frame_file_name(t: usize) -> String {
    format!("{FRAME_FILE_PREFIX}{t:05}.ppm")
}

pub fn write_manifest(root: &Path, rows: &[ManifestRow]) -> Result<()> {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for r in rows {
        let label = r.label.map_or_else(|| "-".to_string(), |l| l.to_string());
        s.push_str(&format!("{}\t{}\t{}\n", r.dir, label, r.num_frames));
    }
    let path = root.join(MANIFEST_FILE);
    std::fs::write(&path, s).map_err(|e| TceError::io(&path, e))
}

pub fn parse_manifest(text: &str) -> Result<Vec<ManifestRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim_end() == MANIFEST_HEADER => {}
        other => {
            return Err(TceError::Dataset(format!(
                "manifest header must be {MANIFEST_HEADER:?}, found {:?}",
                other.unwrap_or("")
            )))
        }
    }
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let bad = |what: &str| TceError::Dataset(format!("manifest line {}: {what}: {line:?}", n + 2));
        if fields.len() != 3 {
            return Err(bad("expected 3 tab-separated fields"));
        }
        if fields[0].is_empty() || fields[0].contains(['/', '\\']) || fields[0] == ".." {
            return Err(bad("invalid video directory"));
        }
        let label = match fields[1] {
            "-" | "" => None,
            l => Some(l.parse().map_err(|_| bad("invalid label"))?),
        };
        let num_frames = fields[2].parse().map_err(|_| bad("invalid frame count"))?;
        rows.push(ManifestRow {
            dir: fields[0].to_string(),
            label,
            num_frames,
        });
    }
    Ok(rows)
}

fn count_frames(dir: &Path) -> Result<usize> {
    let mut n = 0;
    while dir.join(frame_file_name(n)).is_file() {
        n += 1;
    }
    Ok(n)
}

/// Reads and validates a dataset directory. Videos are ordered by directory
/// name and numbered from 0 in that order.
pub fn load_dataset(root: &Path) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(TceError::Dataset(format!("{} is not a directory", root.display())));
    }
    let manifest = root.join(MANIFEST_FILE);
    let mut rows = if manifest.is_file() {
        let text = std::fs::read_to_string(&manifest).map_err(|e| TceError::io(&manifest, e))?;
        parse_manifest(&text)?
    } else {
        let mut rows = Vec::new();
        let listing = std::fs::read_dir(root).map_err(|e| TceError::io(root, e))?;
        for entry in listing {
            let entry = entry.map_err(|e| TceError::io(root, e))?;
            if !entry.path().is_dir() {
                continue;
            }
            let n = count_frames(&entry.path())?;
            if n > 0 {
                rows.push(ManifestRow {
                    dir: entry.file_name().to_string_lossy().into_owned(),
                    label: None,
                    num_frames: n,
                });
            }
        }
        rows
    };
    if rows.is_empty() {
        return Err(TceError::Dataset(format!("{} contains no videos", root.display())));
    }
    rows.sort_by(|a, b| a.dir.cmp(&b.dir));
    if let Some(w) = rows.windows(2).find(|w| w[0].dir == w[1].dir) {
        return Err(TceError::Dataset(format!("duplicate video directory {}", w[0].dir)));
    }

    // Every listed frame must exist and share one size.
    let sizes = rows
        .par_iter()
        .map(|r| {
            let dir = root.join(&r.dir);
            if r.num_frames < 2 {
                return Err(TceError::Dataset(format!(
                    "video {} has {} frame(s); at least 2 required",
                    r.dir, r.num_frames
                )));
            }
            let mut size = None;
            for t in 0..r.num_frames {
                let path = dir.join(frame_file_name(t));
                if !path.is_file() {
                    return Err(TceError::Dataset(format!("missing frame {}", path.display())));
                }
                let s = ppm::read_size(&path)?;
                match size {
                    None => size = Some(s),
                    Some(prev) if prev != s => {
                        return Err(TceError::Dataset(format!(
                            "{} is {}x{}, expected {}x{}",
                            path.display(),
                            s.0,
                            s.1,
                            prev.0,
                            prev.1
                        )))
                    }
                    _ => {}
                }
            }
            Ok(size.expect("num_frames >= 2"))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(i) = sizes.iter().position(|s| *s != sizes[0]) {
        return Err(TceError::Dataset(format!(
            "inconsistent frame sizes: {} is {}x{}, {} is {}x{}",
            rows[0].dir, sizes[0].0, sizes[0].1, rows[i].dir, sizes[i].0, sizes[i].1
        )));
    }

    let videos = rows
        .into_iter()
        .enumerate()
        .map(|(i, r)| VideoEntry {
            video_id: i,
            length: r.num_frames,
            dir: r.dir,
            label: r.label,
        })
        .collect();
    DatasetIndex::new(root, videos)
}

pub fn load_video(index: &DatasetIndex, video_id: usize) -> Result<VideoSequence> {
    let dir = index.video_dir(video_id);
    let frames = (0..index.video(video_id).length)
        .map(|t| ppm::read(&dir.join(frame_file_name(t))))
        .collect::<Result<Vec<_>>>()?;
    VideoSequence::new(frames)
}

/// Loads every video into memory, in id order.
pub fn load_all_videos(index: &DatasetIndex) -> Result<Vec<VideoSequence>> {
    (0..index.num_videos())
        .into_par_iter()
        .map(|v| load_video(index, v))
        .collect()
}
