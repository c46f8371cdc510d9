//! Portable float map images (`PF` color, `Pf` grayscale), stored as f32.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::map::ImageMap;

/// Encode `map` as little-endian PFM. Values are rounded to f32.
pub fn encode_pfm(map: &ImageMap) -> Result<Vec<u8>> {
    let tag = match map.channels() {
        1 => "Pf",
        3 => "PF",
        c => return Err(Error::InvalidParameter(format!("PFM supports 1 or 3 channels, got {c}"))),
    };
    let (w, h, c) = (map.width(), map.height(), map.channels());
    let mut out = format!("{tag}\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * c * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            for ch in 0..c {
                out.extend_from_slice(&(map.get(x, y, ch) as f32).to_le_bytes());
            }
        }
    }
    Ok(out)
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| &bytes[start..*pos])
}

/// Decode PFM bytes; `path` only labels errors.
pub fn decode_pfm(bytes: &[u8], path: &Path) -> Result<ImageMap> {
    let bad = |msg: &str| Error::format("PFM", path, msg);
    let mut pos = 0;
    let channels = match next_token(bytes, &mut pos) {
        Some(b"PF") => 3,
        Some(b"Pf") => 1,
        _ => return Err(bad("missing PF/Pf magic")),
    };
    let mut number = |what: &str| -> Result<String> {
        next_token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .map(str::to_owned)
            .ok_or_else(|| bad(&format!("missing {what}")))
    };
    let w: usize = number("width")?.parse().map_err(|_| bad("bad width"))?;
    let h: usize = number("height")?.parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = number("scale")?.parse().map_err(|_| bad("bad scale"))?;
    if w == 0 || h == 0 || scale == 0.0 || !scale.is_finite() {
        return Err(bad("degenerate header"));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = w * h * channels * 4;
    if bytes.len() < pos + need {
        return Err(bad(&format!("raster truncated: need {need} bytes, have {}", bytes.len().saturating_sub(pos))));
    }
    let little = scale < 0.0;
    let raster = &bytes[pos..pos + need];
    let mut map = ImageMap::zeros(w, h, channels);
    for (k, chunk) in raster.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let ch = k % channels;
        let x = (k / channels) % w;
        let row = k / (channels * w);
        map.set(x, h - 1 - row, ch, v as f64);
    }
    Ok(map)
}

pub fn write_pfm(path: &Path, map: &ImageMap) -> Result<()> {
    let bytes = encode_pfm(map)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_pfm(path: &Path) -> Result<ImageMap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pfm(&bytes, path)
}
