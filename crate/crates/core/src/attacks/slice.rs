//! Decision maps on 2-D planes through input space.

use std::io::Write;
use std::path::Path;

use super::model::Classifier;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SLICE_LO: f64 = -1.5;
pub const SLICE_HI: f64 = 1.5;

/// Decisions on the plane `p0 + a (p1 - p0) + b (p2 - p0)` for a grid of
/// (a, b) in [-1.5, 1.5]^2 with both endpoints included.
#[derive(Clone, Debug)]
pub struct SliceScan {
    pub origin: Vec<f64>,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
    pub grid: usize,
    /// Row-major over b (rows) then a (columns).
    pub decisions: Vec<usize>,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SliceScan {
    pub fn coordinate(&self, i: usize) -> f64 {
        SLICE_LO + (SLICE_HI - SLICE_LO) * i as f64 / (self.grid - 1) as f64
    }

    pub fn point(&self, a: f64, b: f64) -> Vec<f64> {
        self.origin
            .iter()
            .zip(&self.u)
            .zip(&self.v)
            .map(|((o, u), v)| o + a * u + b * v)
            .collect()
    }

    pub fn decision(&self, ia: usize, ib: usize) -> usize {
        self.decisions[ib * self.grid + ia]
    }

    /// Fraction of grid points satisfying `pred(point, decision)`.
    pub fn fraction(&self, mut pred: impl FnMut(&[f64], usize) -> bool) -> f64 {
        let mut hits = 0;
        for ib in 0..self.grid {
            for ia in 0..self.grid {
                let p = self.point(self.coordinate(ia), self.coordinate(ib));
                if pred(&p, self.decision(ia, ib)) {
                    hits += 1;
                }
            }
        }
        hits as f64 / self.decisions.len() as f64
    }

    /// Writes `a,b,class` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "a,b,class")?;
        for ib in 0..self.grid {
            for ia in 0..self.grid {
                writeln!(out, "{},{},{}", self.coordinate(ia), self.coordinate(ib), self.decision(ia, ib))?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Grey-level map, one level per class; b grows upward.
    pub fn write_pgm(&self, path: &Path, classes: usize) -> Result<()> {
        let g = self.grid;
        let step = 255.0 / (classes.max(2) - 1) as f64;
        let mut img = vec![0.0; g * g];
        for ib in 0..g {
            for ia in 0..g {
                img[(g - 1 - ib) * g + ia] = (self.decision(ia, ib) as f64 * step).round() / 255.0;
            }
        }
        crate::datagen::write_pgm(path, g, g, &img)
    }
}

/// Scans the plane through `p0`, `p1`, `p2` (single samples, any shape).
pub fn scan_decision_slice(
    classifier: &dyn Classifier,
    p0: &Tensor,
    p1: &Tensor,
    p2: &Tensor,
    grid: usize,
) -> Result<SliceScan> {
    if p0.shape() != p1.shape() || p0.shape() != p2.shape() {
        return Err(Error::shape("scan_decision_slice", p0.shape(), p1.shape()));
    }
    if grid < 2 {
        return Err(Error::Config(format!("slice grid needs at least 2 points per side, got {grid}")));
    }
    let u: Vec<f64> = p1.data().iter().zip(p0.data()).map(|(a, b)| a - b).collect();
    let v: Vec<f64> = p2.data().iter().zip(p0.data()).map(|(a, b)| a - b).collect();
    let (uu, vv, uv) = (dot(&u, &u), dot(&v, &v), dot(&u, &v));
    if uu * vv - uv * uv <= 1e-12 * uu * vv || uu == 0.0 || vv == 0.0 {
        return Err(Error::DegeneratePlane(
            "the three anchor points are collinear or coincide".into(),
        ));
    }
    let mut scan = SliceScan {
        origin: p0.data().to_vec(),
        u,
        v,
        grid,
        decisions: Vec::with_capacity(grid * grid),
    };
    let mut shape = p0.shape().to_vec();
    if shape.len() < 2 || shape[0] != 1 {
        shape.insert(0, 1);
    }
    let sample = scan.origin.len();
    let coords: Vec<(f64, f64)> = (0..grid)
        .flat_map(|ib| (0..grid).map(move |ia| (ia, ib)))
        .map(|(ia, ib)| (scan.coordinate(ia), scan.coordinate(ib)))
        .collect();
    for chunk in coords.chunks(512) {
        let mut data = Vec::with_capacity(chunk.len() * sample);
        for &(a, b) in chunk {
            data.extend(scan.point(a, b));
        }
        shape[0] = chunk.len();
        scan.decisions.extend(classifier.predict(&Tensor::new(&shape, data)?)?);
    }
    Ok(scan)
}
