//! Pixel-level utilities: dequantization, shift augmentation and PGM files.

use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps 256-level pixels `k / 255` to `(k + u) / 256` with `u ~ U[0, 1)`,
/// so outputs lie in `[0, 1)` and each level fills its own bin.
pub fn dequantize<R: Rng + ?Sized>(images: &Tensor, rng: &mut R) -> Tensor {
    let mut out = images.clone();
    for v in out.data_mut() {
        let k = (*v * 255.0).round().clamp(0.0, 255.0);
        let u: f64 = rng.random();
        *v = (k + u) / 256.0;
    }
    out.requires_grad = false;
    out
}

/// Translates one (C, H, W) image by (dx, dy) with zero fill; positive dx
/// moves content right, positive dy moves it down.
pub fn shift_image(img: &[f64], c: usize, h: usize, w: usize, dx: i64, dy: i64) -> Vec<f64> {
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for r in 0..h as i64 {
            let sr = r - dy;
            if sr < 0 || sr >= h as i64 {
                continue;
            }
            for col in 0..w as i64 {
                let sc = col - dx;
                if sc < 0 || sc >= w as i64 {
                    continue;
                }
                out[(ch * h + r as usize) * w + col as usize] = img[(ch * h + sr as usize) * w + sc as usize];
            }
        }
    }
    out
}

/// Shifts every image of an (N, C, H, W) batch by an independent uniform
/// offset in `[-max_shift, max_shift]` per axis.
pub fn augment_shift<R: Rng + ?Sized>(images: &Tensor, max_shift: i64, rng: &mut R) -> Tensor {
    let s = images.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let mut out = images.clone();
    for i in 0..s[0] {
        let dx = rng.random_range(-max_shift..=max_shift);
        let dy = rng.random_range(-max_shift..=max_shift);
        let shifted = shift_image(images.row(i), c, h, w, dx, dy);
        out.row_mut(i).copy_from_slice(&shifted);
    }
    out
}

/// Reads an 8-bit binary ("P5") PGM as (height, width, values in [0, 1]).
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<f64>)> {
    let bytes = std::fs::read(path)?;
    let bad = |d: &str| Error::Format {
        path: path.to_path_buf(),
        detail: d.to_string(),
    };
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated PGM header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (expected P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad PGM header number"));
    let (w, h, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval == 0 || maxval > 255 || w == 0 || h == 0 {
        return Err(bad("only 8-bit PGM files are supported"));
    }
    let body = &bytes[pos + 1..];
    if body.len() < w * h {
        return Err(bad(&format!("truncated PGM data: expected {} bytes, found {}", w * h, body.len())));
    }
    Ok((h, w, body[..w * h].iter().map(|&b| f64::from(b) / maxval as f64).collect()))
}

/// Writes values in [0, 1] as an 8-bit binary PGM.
pub fn write_pgm(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(values.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, out)?;
    Ok(())
}

/// Tiles single-channel (H, W) images into a grid with `cols` columns and a
/// one-pixel gap.
pub fn write_pgm_grid(path: &Path, images: &[&[f64]], h: usize, w: usize, cols: usize) -> Result<()> {
    let cols = cols.max(1).min(images.len().max(1));
    let rows = images.len().div_ceil(cols).max(1);
    let (gh, gw) = (rows * (h + 1) - 1, cols * (w + 1) - 1);
    let mut grid = vec![1.0; gh * gw];
    for (k, img) in images.iter().enumerate() {
        let (r0, c0) = ((k / cols) * (h + 1), (k % cols) * (w + 1));
        for r in 0..h {
            for c in 0..w {
                grid[(r0 + r) * gw + c0 + c] = img[r * w + c];
            }
        }
    }
    write_pgm(path, gh, gw, &grid)
}
