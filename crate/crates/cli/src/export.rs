//! Binary PGM images and CSV tables.

use std::path::Path;

use acpo_core::Tensor;
use serde::Serialize;

use crate::error::CliError;

/// Writes a `[H, W]` image in `[0, 1]` as 8-bit binary PGM.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<(), CliError> {
    let shape = image.shape();
    if shape.len() != 2 {
        return Err(CliError::Io(format!("PGM export needs a [H, W] image, got {shape:?}")));
    }
    let mut bytes = format!("P5\n{} {}\n255\n", shape[1], shape[0]).into_bytes();
    bytes.extend(image.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, bytes).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Reads an 8- or 16-bit binary PGM into `[H, W]` values in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<Tensor, CliError> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    parse_pgm(&bytes).map_err(|m| CliError::Io(format!("{}: {m}", path.display())))
}

pub fn parse_pgm(bytes: &[u8]) -> Result<Tensor, String> {
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("incomplete PGM header".into());
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(format!("expected binary PGM (P5), found `{}`", fields[0]));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| format!("bad header field `{s}`"));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if w == 0 || h == 0 || max == 0 || max > 65535 {
        return Err(format!("unsupported PGM geometry {w}x{h} max {max}"));
    }
    let body = &bytes[(pos + 1).min(bytes.len())..];
    let width = if max < 256 { 1 } else { 2 };
    if body.len() < w * h * width {
        return Err(format!("PGM body has {} bytes, expected {}", body.len(), w * h * width));
    }
    let data = (0..w * h)
        .map(|i| {
            let v = if width == 1 { body[i] as f64 } else { u16::from_be_bytes([body[2 * i], body[2 * i + 1]]) as f64 };
            v / max as f64
        })
        .collect();
    Tensor::new(vec![h, w], data).map_err(|e| e.to_string())
}

/// `left | gap | right` for two equally sized `[H, W]` images.
pub fn side_by_side(left: &Tensor, right: &Tensor, gap: usize) -> Result<Tensor, CliError> {
    let (h, w) = (left.shape()[0], left.shape()[1]);
    if right.shape() != left.shape() {
        return Err(CliError::Io(format!("side-by-side of {:?} and {:?}", left.shape(), right.shape())));
    }
    let total = 2 * w + gap;
    let mut data = vec![1.0; h * total];
    for r in 0..h {
        data[r * total..r * total + w].copy_from_slice(&left.data()[r * w..(r + 1) * w]);
        data[r * total + w + gap..(r + 1) * total].copy_from_slice(&right.data()[r * w..(r + 1) * w]);
    }
    Ok(Tensor::new(vec![h, total], data)?)
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
