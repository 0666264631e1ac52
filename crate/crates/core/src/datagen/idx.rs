//! The IDX container used by the MNIST distribution: a big-endian magic
//! `0x0000_08NN` (unsigned bytes, NN dimensions), NN big-endian u32 sizes,
//! then the raw bytes.

use std::path::Path;

use super::{LabeledBatch, SplitTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_MAGIC: u32 = 0x0000_0803;
pub const LABELS_MAGIC: u32 = 0x0000_0801;

#[derive(Clone, Debug, PartialEq)]
pub struct Idx {
    pub magic: u32,
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

/// Parses an IDX byte buffer, requiring the given magic.
pub fn parse_idx(bytes: &[u8], expected_magic: u32, path: &Path) -> Result<Idx> {
    if bytes.len() < 4 {
        return Err(format_err(path, format!("truncated header: {} bytes", bytes.len())));
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().unwrap());
    if magic != expected_magic {
        return Err(format_err(path, format!("wrong magic: expected {expected_magic:#010x}, found {magic:#010x}")));
    }
    let ndim = (magic & 0xff) as usize;
    let header = 4 + 4 * ndim;
    if bytes.len() < header {
        return Err(format_err(path, format!("truncated header: expected {header} bytes, found {}", bytes.len())));
    }
    let dims: Vec<usize> = (0..ndim)
        .map(|i| u32::from_be_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let expected = header + dims.iter().product::<usize>();
    if bytes.len() != expected {
        return Err(format_err(
            path,
            format!("truncated or oversized file: expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    Ok(Idx {
        magic,
        dims,
        data: bytes[header..].to_vec(),
    })
}

/// Images as (N, 1, rows, cols) with pixel bytes scaled to [0, 1].
pub fn read_idx_images(path: &Path) -> Result<Tensor> {
    let idx = parse_idx(&std::fs::read(path)?, IMAGES_MAGIC, path)?;
    let (n, r, c) = (idx.dims[0], idx.dims[1], idx.dims[2]);
    if n == 0 {
        return Err(format_err(path, "no images"));
    }
    Tensor::new(&[n, 1, r, c], idx.data.iter().map(|&b| f64::from(b) / 255.0).collect())
}

pub fn read_idx_labels(path: &Path) -> Result<Vec<usize>> {
    let idx = parse_idx(&std::fs::read(path)?, LABELS_MAGIC, path)?;
    Ok(idx.data.iter().map(|&b| b as usize).collect())
}

fn header(magic: u32, dims: &[usize]) -> Vec<u8> {
    let mut out = magic.to_be_bytes().to_vec();
    for &d in dims {
        out.extend_from_slice(&(d as u32).to_be_bytes());
    }
    out
}

/// Writes (N, 1, R, C) or (N, R, C) images in [0, 1] as bytes `round(255 v)`.
pub fn write_idx_images(path: &Path, images: &Tensor) -> Result<()> {
    let s = images.shape();
    let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
    let mut out = header(IMAGES_MAGIC, &[s[0], r, c]);
    out.extend(images.data().iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    std::fs::write(path, out)?;
    Ok(())
}

pub fn write_idx_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut out = header(LABELS_MAGIC, &[labels.len()]);
    out.extend(labels.iter().map(|&l| l as u8));
    std::fs::write(path, out)?;
    Ok(())
}

/// Loads the standard MNIST file pair from `dir`.
pub fn load_mnist(dir: &Path, train: bool) -> Result<LabeledBatch> {
    let prefix = if train { "train" } else { "t10k" };
    let images = read_idx_images(&dir.join(format!("{prefix}-images-idx3-ubyte")))?;
    let labels = read_idx_labels(&dir.join(format!("{prefix}-labels-idx1-ubyte")))?;
    if let Some(&bad) = labels.iter().find(|&&l| l >= 10) {
        return Err(Error::Label { label: bad, classes: 10 });
    }
    let tag = if train { SplitTag::Train } else { SplitTag::TestClean };
    LabeledBatch::new(images, labels, tag)
}
