//! Datasets: adversarial spheres, MNIST from IDX files, and the binary and
//! texture shiftMNIST distribution-shift benchmarks.

mod idx;
mod images;
mod mi;
mod shift;
mod spheres;
mod textures;

pub use idx::{load_mnist, parse_idx, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels, Idx};
pub use images::{augment_shift, dequantize, read_pgm, shift_image, write_pgm, write_pgm_grid};
pub use mi::plugin_mutual_information;
pub use shift::{code_pixel, make_binary_shift, make_texture_shift, Coupling, ShiftVariant, MASK_THRESHOLD};
pub use spheres::{perturb_sphere_norm, rotate_sphere, sample_spheres, SpheresSpec};
pub use textures::{TextureBank, TEXTURE_CLASSES};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Which distribution a batch was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    TestClean,
    TestAdv,
}

impl SplitTag {
    pub fn as_str(self) -> &'static str {
        match self {
            SplitTag::Train => "train",
            SplitTag::TestClean => "test_clean",
            SplitTag::TestAdv => "test_adv",
        }
    }
}

/// Inputs with integer labels and their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledBatch {
    pub inputs: Tensor,
    pub labels: Vec<usize>,
    pub tag: SplitTag,
}

impl LabeledBatch {
    pub fn new(inputs: Tensor, labels: Vec<usize>, tag: SplitTag) -> Result<Self> {
        if inputs.batch() != labels.len() {
            return Err(Error::shape("labeled batch", &[inputs.batch()], &[labels.len()]));
        }
        Ok(Self { inputs, labels, tag })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, idx: &[usize]) -> Self {
        Self {
            inputs: self.inputs.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            tag: self.tag,
        }
    }

    /// First `n` samples (or all of them).
    pub fn take(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.select(&idx)
    }

    pub fn with_tag(mut self, tag: SplitTag) -> Self {
        self.tag = tag;
        self
    }
}
