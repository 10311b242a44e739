//! Netpbm-family readers and writers: PFM (float disparity), PPM P6 (RGB)
//! and PGM P5 (masks).
//!
//! PFM files are written little-endian (negative scale) with rows stored
//! bottom-up. Samples are `f32`, so a map round-trips bit-exactly when its
//! values are representable in `f32`; PPM/PGM round-trip exactly on 8-bit
//! levels.

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use srstereo_core::{Grid, Image, Mask};

use crate::error::{AppError, AppResult};

fn bad(path: &Path, msg: impl Into<String>) -> AppError {
    AppError::Format(format!("{}: {}", path.display(), msg.into()))
}

/// Splits the first `count` whitespace-separated header tokens (skipping
/// `#` comments) and returns them with the offset of the byte after the
/// single whitespace that ends the header.
fn header_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(count);
    let mut i = 0;
    while tokens.len() < count {
        while i < bytes.len() && (bytes[i].is_ascii_whitespace() || bytes[i] == b'#') {
            if bytes[i] == b'#' {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            } else {
                i += 1;
            }
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return None;
        }
        tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
    }
    // exactly one whitespace byte separates the header from the data
    if i >= bytes.len() || !bytes[i].is_ascii_whitespace() {
        return None;
    }
    Some((tokens, i + 1))
}

fn parse_dims(path: &Path, w: &str, h: &str) -> AppResult<(usize, usize)> {
    let w: usize = w.parse().map_err(|_| bad(path, format!("bad width {w:?}")))?;
    let h: usize = h.parse().map_err(|_| bad(path, format!("bad height {h:?}")))?;
    if w == 0 || h == 0 {
        return Err(bad(path, "empty image"));
    }
    Ok((w, h))
}

fn write_file(path: &Path, header: &str, data: &[u8]) -> AppResult<()> {
    let mut f = io::BufWriter::new(fs::File::create(path)?);
    f.write_all(header.as_bytes())?;
    f.write_all(data)?;
    f.flush()?;
    Ok(())
}

/// Encodes a single-channel float map as PFM bytes.
pub fn encode_pfm(values: &Grid<f64>) -> Vec<u8> {
    let (h, w) = values.dims();
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(4 * h * w);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&(*values.get(y, x) as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(path: &Path, bytes: &[u8]) -> AppResult<Grid<f64>> {
    let (tok, off) = header_tokens(bytes, 4).ok_or_else(|| bad(path, "truncated PFM header"))?;
    if tok[0] != "Pf" {
        return Err(bad(path, format!("expected single-channel PFM, found {:?}", tok[0])));
    }
    let (w, h) = parse_dims(path, &tok[1], &tok[2])?;
    let scale: f64 = tok[3].parse().map_err(|_| bad(path, format!("bad scale {:?}", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return Err(bad(path, "zero scale"));
    }
    let data = &bytes[off..];
    if data.len() != 4 * w * h {
        return Err(bad(path, format!("expected {} data bytes, found {}", 4 * w * h, data.len())));
    }
    let little = scale < 0.0;
    let mut grid = Grid::new(h, w, 0.0);
    for (k, chunk) in data.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, x) = (k / w, k % w);
        grid.set(h - 1 - row, x, f64::from(v));
    }
    Ok(grid)
}

pub fn write_pfm(path: &Path, values: &Grid<f64>) -> AppResult<()> {
    Ok(fs::write(path, encode_pfm(values))?)
}

pub fn read_pfm(path: &Path) -> AppResult<Grid<f64>> {
    decode_pfm(path, &fs::read(path)?)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// RGB image (values in `[0, 1]`, rounded to 8 bits) as P6 bytes.
pub fn encode_ppm(img: &Image) -> AppResult<Vec<u8>> {
    if img.channels() != 3 {
        return Err(AppError::Format(format!("PPM needs 3 channels, got {}", img.channels())));
    }
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push(to_byte(img.get(c, y, x)));
            }
        }
    }
    Ok(out)
}

pub fn decode_ppm(path: &Path, bytes: &[u8]) -> AppResult<Image> {
    let (tok, off) = header_tokens(bytes, 4).ok_or_else(|| bad(path, "truncated PPM header"))?;
    if tok[0] != "P6" || tok[3] != "255" {
        return Err(bad(path, "expected 8-bit binary PPM (P6, maxval 255)"));
    }
    let (w, h) = parse_dims(path, &tok[1], &tok[2])?;
    let data = &bytes[off..];
    if data.len() != 3 * w * h {
        return Err(bad(path, format!("expected {} data bytes, found {}", 3 * w * h, data.len())));
    }
    let mut img = Image::new(3, h, w);
    for (k, &b) in data.iter().enumerate() {
        let (pix, c) = (k / 3, k % 3);
        img.set(c, pix / w, pix % w, f64::from(b) / 255.0);
    }
    Ok(img)
}

pub fn write_ppm(path: &Path, img: &Image) -> AppResult<()> {
    Ok(fs::write(path, encode_ppm(img)?)?)
}

pub fn read_ppm(path: &Path) -> AppResult<Image> {
    decode_ppm(path, &fs::read(path)?)
}

/// Raw 8-bit RGB pixels (row-major, interleaved) as P6.
pub fn write_ppm_rgb8(path: &Path, w: usize, h: usize, rgb: &[u8]) -> AppResult<()> {
    assert_eq!(rgb.len(), 3 * w * h);
    write_file(path, &format!("P6\n{w} {h}\n255\n"), rgb)
}

/// Mask as P5 with 255 for `true` and 0 for `false`.
pub fn encode_pgm(mask: &Mask) -> Vec<u8> {
    let (h, w) = mask.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.as_slice().iter().map(|&m| if m { 255u8 } else { 0 }));
    out
}

/// Reads a P5 file as a mask (any nonzero level is `true`).
pub fn decode_pgm(path: &Path, bytes: &[u8]) -> AppResult<Mask> {
    let (tok, off) = header_tokens(bytes, 4).ok_or_else(|| bad(path, "truncated PGM header"))?;
    if tok[0] != "P5" || tok[3] != "255" {
        return Err(bad(path, "expected 8-bit binary PGM (P5, maxval 255)"));
    }
    let (w, h) = parse_dims(path, &tok[1], &tok[2])?;
    let data = &bytes[off..];
    if data.len() != w * h {
        return Err(bad(path, format!("expected {} data bytes, found {}", w * h, data.len())));
    }
    Ok(Grid::from_vec(h, w, data.iter().map(|&b| b != 0).collect()))
}

pub fn write_pgm(path: &Path, mask: &Mask) -> AppResult<()> {
    Ok(fs::write(path, encode_pgm(mask))?)
}

pub fn read_pgm(path: &Path) -> AppResult<Mask> {
    decode_pgm(path, &fs::read(path)?)
}
