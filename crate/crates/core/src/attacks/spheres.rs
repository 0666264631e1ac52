//! Analytic classifiers and the last-coordinate attack for concentric spheres.

use crate::datagen::{LabeledBatch, SpheresSpec, SplitTag};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Label 1 (outer) iff the norm of all coordinates but the last exceeds the
/// mid radius. Ignores `x[d-1]` entirely.
pub fn misaligned_sphere_classifier(x: &[f64], r1: f64, r2: f64) -> usize {
    let head = &x[..x.len().saturating_sub(1)];
    let norm = head.iter().map(|v| v * v).sum::<f64>().sqrt();
    usize::from(norm > 0.5 * (r1 + r2))
}

/// The max-margin rule on the full norm.
pub fn norm_sphere_classifier(x: &[f64], r1: f64, r2: f64) -> usize {
    let norm = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    usize::from(norm > 0.5 * (r1 + r2))
}

#[derive(Clone, Debug)]
pub struct AdversarialSpheres {
    /// Flipped points carry their new true label; skipped points are unchanged.
    pub batch: LabeledBatch,
    pub flipped: usize,
    /// Points whose first d-1 coordinates already exceed the target radius.
    pub skipped: usize,
}

/// Moves every point to the other sphere by rewriting only `x_d`, keeping its
/// sign (zero counts as positive).
pub fn adversarial_last_coordinate(batch: &LabeledBatch, spec: &SpheresSpec) -> Result<AdversarialSpheres> {
    let d = batch.inputs.row_len();
    if d < 2 {
        return Err(Error::Config(format!("sphere dimension must be at least 2, got {d}")));
    }
    let mut data = batch.inputs.data().to_vec();
    let mut labels = batch.labels.clone();
    let (mut flipped, mut skipped) = (0, 0);
    for (i, label) in labels.iter_mut().enumerate() {
        let row = &mut data[i * d..(i + 1) * d];
        let target = 1 - *label;
        let r = spec.radius(target);
        let head: f64 = row[..d - 1].iter().map(|v| v * v).sum();
        if head > r * r {
            skipped += 1;
            continue;
        }
        let sign = if row[d - 1] < 0.0 { -1.0 } else { 1.0 };
        row[d - 1] = sign * (r * r - head).sqrt();
        *label = target;
        flipped += 1;
    }
    Ok(AdversarialSpheres {
        batch: LabeledBatch::new(Tensor::new(batch.inputs.shape(), data)?, labels, SplitTag::TestAdv)?,
        flipped,
        skipped,
    })
}
