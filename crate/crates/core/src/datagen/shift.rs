//! shiftMNIST: digits with an extra label shortcut that the adversarial
//! test distribution breaks.

use rand::Rng;

use super::textures::TextureBank;
use super::{LabeledBatch, SplitTag};
use crate::error::{Error, Result};

/// Digit pixels above this value are foreground in texture compositing.
pub const MASK_THRESHOLD: f64 = 0.3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShiftVariant {
    Binary,
    Texture,
}

/// How the shortcut relates to the label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Coupling {
    /// Shortcut id equals the label.
    Planted,
    /// No shortcut at all.
    Removed,
    /// Shortcut id drawn uniformly, independent of the label.
    Randomized,
}

impl std::str::FromStr for Coupling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "planted" => Ok(Self::Planted),
            "removed" => Ok(Self::Removed),
            "randomized" => Ok(Self::Randomized),
            o => Err(Error::Config(format!("unknown coupling {o:?} (expected one of: planted, removed, randomized)"))),
        }
    }
}

/// Position (row, col) of the binary code pixel for `class`.
pub fn code_pixel(class: usize) -> (usize, usize) {
    (2 + 2 * class, 0)
}

fn check_images(batch: &LabeledBatch) -> Result<(usize, usize)> {
    let s = batch.inputs.shape();
    if s.len() != 4 || s[1] != 1 {
        return Err(Error::shape("shiftMNIST", s, &[0, 1, 28, 28]));
    }
    if let Some(&bad) = batch.labels.iter().find(|&&l| l >= 10) {
        return Err(Error::Label { label: bad, classes: 10 });
    }
    Ok((s[2], s[3]))
}

fn shortcut_ids<R: Rng + ?Sized>(labels: &[usize], coupling: Coupling, rng: &mut R) -> Vec<Option<usize>> {
    labels
        .iter()
        .map(|&l| match coupling {
            Coupling::Planted => Some(l),
            Coupling::Removed => None,
            Coupling::Randomized => Some(rng.random_range(0..10)),
        })
        .collect()
}

fn tag_for(batch: &LabeledBatch, coupling: Coupling) -> SplitTag {
    if coupling == Coupling::Planted {
        batch.tag
    } else {
        SplitTag::TestAdv
    }
}

/// Sets the code pixel of the shortcut class to 1. Returns the batch and the
/// shortcut id of every sample.
pub fn make_binary_shift<R: Rng + ?Sized>(
    batch: &LabeledBatch,
    coupling: Coupling,
    rng: &mut R,
) -> Result<(LabeledBatch, Vec<Option<usize>>)> {
    let (h, w) = check_images(batch)?;
    let ids = shortcut_ids(&batch.labels, coupling, rng);
    let mut out = batch.clone();
    for (i, id) in ids.iter().enumerate() {
        if let Some(c) = id {
            let (r, col) = code_pixel(*c);
            if r >= h || col >= w {
                return Err(Error::Config(format!("{h}x{w} images have no room for the code pixel of class {c}")));
            }
            out.inputs.row_mut(i)[r * w + col] = 1.0;
        }
    }
    out.tag = tag_for(batch, coupling);
    Ok((out, ids))
}

/// Composites each digit (pixels > `threshold`) over a texture patch of the
/// shortcut class.
pub fn make_texture_shift<R: Rng + ?Sized>(
    batch: &LabeledBatch,
    coupling: Coupling,
    bank: &TextureBank,
    threshold: f64,
    rng: &mut R,
) -> Result<(LabeledBatch, Vec<Option<usize>>)> {
    let (h, w) = check_images(batch)?;
    let ids = shortcut_ids(&batch.labels, coupling, rng);
    let mut out = batch.clone();
    for (i, id) in ids.iter().enumerate() {
        if let Some(c) = id {
            let tex = bank.sample(*c, h, w, rng);
            for (p, t) in out.inputs.row_mut(i).iter_mut().zip(tex) {
                if *p <= threshold {
                    *p = t;
                }
            }
        }
    }
    out.tag = tag_for(batch, coupling);
    Ok((out, ids))
}
