//! Binary PPM (P6, maxval 255). Channel values map to `[0, 1]` by `/255`.

use std::path::Path;

use crate::error::{Result, TceError};
use crate::image::Image;

pub fn encode(img: &Image) -> Result<Vec<u8>> {
    if img.channels() != 3 {
        return Err(TceError::arg(format!(
            "PPM frames are RGB; image has {} channels",
            img.channels()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(img.get(c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Snaps a value to the nearest representable 8-bit level.
pub fn quantize(v: f64) -> f64 {
    to_byte(v) as f64 / 255.0
}

struct Header {
    width: usize,
    height: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> std::result::Result<Header, String> {
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err("not a binary PPM (missing P6 magic)".into());
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(_) => break,
                None => return Err("truncated PPM header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err("malformed PPM header".into());
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed PPM header number")?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("malformed PPM header terminator".into());
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported PPM maxval {maxval} (only 255)"));
    }
    if width == 0 || height == 0 {
        return Err("PPM has zero size".into());
    }
    Ok(Header {
        width,
        height,
        data_start: pos + 1,
    })
}

pub fn decode(bytes: &[u8]) -> std::result::Result<Image, String> {
    let h = parse_header(bytes)?;
    let n = h.width * h.height * 3;
    let data = bytes
        .get(h.data_start..h.data_start + n)
        .ok_or_else(|| format!("PPM pixel data truncated (expected {n} bytes)"))?;
    let mut img = Image::zeros(3, h.height, h.width);
    for y in 0..h.height {
        for x in 0..h.width {
            for c in 0..3 {
                img.set(c, y, x, data[(y * h.width + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Ok(img)
}

pub fn read(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| TceError::io(path, e))?;
    decode(&bytes).map_err(|m| TceError::Dataset(format!("{}: {m}", path.display())))
}

/// `(width, height)` from the header only.
pub fn read_size(path: &Path) -> Result<(usize, usize)> {
    use std::io::Read;
    let mut buf = Vec::with_capacity(64);
    std::fs::File::open(path)
        .and_then(|f| f.take(64).read_to_end(&mut buf))
        .map_err(|e| TceError::io(path, e))?;
    let h = parse_header(&buf).map_err(|m| TceError::Dataset(format!("{}: {m}", path.display())))?;
    Ok((h.width, h.height))
}

pub fn write(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode(img)?).map_err(|e| TceError::io(path, e))
}
