//! File formats: PFM images, PLY clouds, JSON manifests, PNG previews and CSV logs.

pub mod checkpoint;
pub mod dataset;
pub mod pfm;
pub mod ply;

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::map::ImageMap;
use crate::optim::LogRow;

/// Display gamma of PNG previews.
pub const PREVIEW_GAMMA: f64 = 2.2;

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// 8-bit PNG of a raw-linear map (1 or 3 channels) with display gamma applied.
pub fn write_png_preview(path: &Path, map: &ImageMap) -> Result<()> {
    write_png(path, map, 1.0 / PREVIEW_GAMMA)
}

/// 8-bit PNG of a map whose values are already display-ready in `[0, 1]`.
pub fn write_png_display(path: &Path, map: &ImageMap) -> Result<()> {
    write_png(path, map, 1.0)
}

fn write_png(path: &Path, map: &ImageMap, exponent: f64) -> Result<()> {
    let color = match map.channels() {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::InvalidParameter(format!("PNG preview needs 1 or 3 channels, got {c}"))),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), map.width() as u32, map.height() as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let as_io = |e: png::EncodingError| Error::io(path, std::io::Error::other(e));
    let mut writer = enc.write_header().map_err(as_io)?;
    let bytes: Vec<u8> = map
        .data()
        .iter()
        .map(|&v| {
            let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
            (255.0 * v.powf(exponent)).round() as u8
        })
        .collect();
    writer.write_image_data(&bytes).map_err(as_io)?;
    writer.finish().map_err(as_io)
}

pub fn write_log_csv(path: &Path, rows: &[LogRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_log_csv(path: &Path) -> Result<Vec<LogRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<LogRow>, _>>()?;
    Ok(rows)
}
