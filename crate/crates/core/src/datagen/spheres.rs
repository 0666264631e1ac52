//! Two concentric spheres in d dimensions; label 0 is the inner sphere.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{LabeledBatch, SplitTag};
use crate::error::{Error, Result};
use crate::rng::rng_for;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SpheresSpec {
    pub d: usize,
    pub r1: f64,
    pub r2: f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

impl Default for SpheresSpec {
    fn default() -> Self {
        Self {
            d: 100,
            r1: 1.0,
            r2: 10.0,
            n_train: 20_000,
            n_test: 2_000,
            seed: 0,
        }
    }
}

impl SpheresSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.r1 > 0.0 && self.r1 < self.r2) || self.d < 2 {
            return Err(Error::Config(format!(
                "spheres need d >= 2 and 0 < r1 < r2, got d={} r1={} r2={}",
                self.d, self.r1, self.r2
            )));
        }
        Ok(())
    }

    pub fn radius(&self, label: usize) -> f64 {
        if label == 0 {
            self.r1
        } else {
            self.r2
        }
    }

    pub fn train(&self) -> Result<LabeledBatch> {
        self.validate()?;
        sample_spheres(self, self.n_train, &mut rng_for(self.seed, "spheres/train"), SplitTag::Train)
    }

    pub fn test(&self) -> Result<LabeledBatch> {
        self.validate()?;
        sample_spheres(self, self.n_test, &mut rng_for(self.seed, "spheres/test"), SplitTag::TestClean)
    }
}

/// Uniform samples on the two spheres; labels alternate 0, 1, 0, ... so
/// each class gets exactly half of an even `n`.
pub fn sample_spheres<R: Rng + ?Sized>(spec: &SpheresSpec, n: usize, rng: &mut R, tag: SplitTag) -> Result<LabeledBatch> {
    spec.validate()?;
    let d = spec.d;
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % 2;
        let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        let r = spec.radius(label);
        v.iter_mut().for_each(|a| *a *= r / norm);
        data.extend(v);
        labels.push(label);
    }
    LabeledBatch::new(Tensor::new(&[n, d], data)?, labels, tag)
}

/// Rescales `x` to norm `target`: the canonical semantic perturbation.
pub fn perturb_sphere_norm(x: &[f64], target: f64) -> Result<Vec<f64>> {
    let norm = x.iter().map(|a| a * a).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::domain("perturb_sphere_norm", "zero vector has no direction"));
    }
    if norm == target {
        return Ok(x.to_vec());
    }
    Ok(x.iter().map(|a| a * target / norm).collect())
}

/// Rotation by `angle` in the coordinate plane (i, j); preserves the norm.
pub fn rotate_sphere(x: &[f64], i: usize, j: usize, angle: f64) -> Result<Vec<f64>> {
    if i == j || i >= x.len() || j >= x.len() {
        return Err(Error::Config(format!("bad rotation plane ({i}, {j}) for dimension {}", x.len())));
    }
    let (s, c) = angle.sin_cos();
    let mut out = x.to_vec();
    out[i] = c * x[i] - s * x[j];
    out[j] = s * x[i] + c * x[j];
    Ok(out)
}
