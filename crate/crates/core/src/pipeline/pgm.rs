//! Binary greymap (P5) codec.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Greymap {
    pub width: usize,
    pub height: usize,
    pub max_value: u16,
    /// Row-major samples in `0..=max_value`.
    pub pixels: Vec<u16>,
}

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Reads the next whitespace-delimited header token, skipping `#` comments.
fn token<'a>(bytes: &'a [u8], pos: &mut usize) -> Option<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (start < *pos).then(|| &bytes[start..*pos])
}

pub fn decode_pgm(path: &Path, bytes: &[u8]) -> Result<Greymap> {
    let mut pos = 0;
    if token(bytes, &mut pos) != Some(b"P5".as_slice()) {
        return Err(format_err(path, "not a binary PGM (magic P5 expected)"));
    }
    let mut field = |name: &str| -> Result<usize> {
        token(bytes, &mut pos)
            .and_then(|t| std::str::from_utf8(t).ok())
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| format_err(path, format!("bad {name} in header")))
    };
    let width = field("width")?;
    let height = field("height")?;
    let max_value = field("maxval")?;
    if width == 0 || height == 0 || max_value == 0 || max_value > 65535 {
        return Err(format_err(
            path,
            format!("invalid header {width}×{height}, maxval {max_value}"),
        ));
    }
    pos += 1;
    let wide = max_value > 255;
    let n = width * height * if wide { 2 } else { 1 };
    let data = bytes.get(pos..pos + n).ok_or_else(|| {
        format_err(
            path,
            format!("truncated raster: {} of {n} bytes", bytes.len().saturating_sub(pos)),
        )
    })?;
    let pixels: Vec<u16> = if wide {
        data.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]])).collect()
    } else {
        data.iter().map(|&b| b as u16).collect()
    };
    if pixels.iter().any(|&p| p as usize > max_value) {
        return Err(format_err(path, "sample exceeds maxval"));
    }
    Ok(Greymap {
        width,
        height,
        max_value: max_value as u16,
        pixels,
    })
}

pub fn read_pgm(path: &Path) -> Result<Greymap> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_pgm(path, &bytes)
}

pub fn encode_pgm(g: &Greymap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n{}\n", g.width, g.height, g.max_value).into_bytes();
    if g.max_value > 255 {
        out.extend(g.pixels.iter().flat_map(|p| p.to_be_bytes()));
    } else {
        out.extend(g.pixels.iter().map(|&p| p as u8));
    }
    out
}

pub fn write_pgm(path: &Path, g: &Greymap) -> Result<()> {
    fs::write(path, encode_pgm(g)).map_err(|e| Error::io(path, e))
}

/// 8-bit map of a plane, clamping `[-1, 1]` to `[0, 255]`.
pub fn plane_to_greymap(plane: &[f32], height: usize, width: usize) -> Greymap {
    let pixels = plane
        .iter()
        .map(|&v| (((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round()) as u16)
        .collect();
    Greymap {
        width,
        height,
        max_value: 255,
        pixels,
    }
}

/// 8-bit map stretching the plane's own range to `[0, 255]`.
pub fn plane_to_greymap_stretched(plane: &[f32], height: usize, width: usize) -> Greymap {
    let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
    let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let pixels = plane
        .iter()
        .map(|&v| (((v - lo) / span) * 255.0).round() as u16)
        .collect();
    Greymap {
        width,
        height,
        max_value: 255,
        pixels,
    }
}
