//! Background textures for texture shiftMNIST.

use std::path::Path;

use rand::Rng;

use super::images::read_pgm;
use crate::error::{Error, Result};

pub const TEXTURE_CLASSES: usize = 10;

/// Source of per-class background patches.
#[derive(Clone, Debug)]
pub enum TextureBank {
    /// Ten parameterized families, values scaled into `[0, contrast]`:
    /// 0-4 square-wave stripes (vertical p4, horizontal p4, diagonal p5,
    /// anti-diagonal p5, vertical p10), 5 checkerboard, 6 dot lattice,
    /// 7-9 smoothed value noise with cell sizes 2, 5 and 10.
    Procedural { contrast: f64 },
    /// Images loaded from `<dir>/<class>/*.pgm`, cropped at random offsets.
    Directory { patches: Vec<Vec<(usize, usize, Vec<f64>)>>, contrast: f64 },
}

impl TextureBank {
    pub fn procedural(contrast: f64) -> Self {
        TextureBank::Procedural { contrast }
    }

    /// Loads `dir/0/*.pgm` ... `dir/9/*.pgm`; every class needs at least one file.
    pub fn from_dir(dir: &Path, contrast: f64) -> Result<Self> {
        if !dir.is_dir() {
            return Err(Error::Config(format!("texture directory {} does not exist", dir.display())));
        }
        let mut patches = Vec::with_capacity(TEXTURE_CLASSES);
        for class in 0..TEXTURE_CLASSES {
            let sub = dir.join(class.to_string());
            let mut files: Vec<_> = std::fs::read_dir(&sub)
                .map_err(|e| Error::Config(format!("texture class directory {}: {e}", sub.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "pgm"))
                .collect();
            files.sort();
            if files.is_empty() {
                return Err(Error::Config(format!("no .pgm files in {}", sub.display())));
            }
            patches.push(files.iter().map(|f| read_pgm(f)).collect::<Result<Vec<_>>>()?);
        }
        Ok(TextureBank::Directory { patches, contrast })
    }

    /// One h x w patch of texture class `class`.
    pub fn sample<R: Rng + ?Sized>(&self, class: usize, h: usize, w: usize, rng: &mut R) -> Vec<f64> {
        match self {
            TextureBank::Procedural { contrast } => {
                procedural(class, h, w, rng).into_iter().map(|v| v * contrast).collect()
            }
            TextureBank::Directory { patches, contrast } => {
                let list = &patches[class % TEXTURE_CLASSES];
                let (ph, pw, data) = &list[rng.random_range(0..list.len())];
                let (r0, c0) = (rng.random_range(0..*ph), rng.random_range(0..*pw));
                // crops wrap around, so small sources still tile the patch
                (0..h * w)
                    .map(|k| data[((r0 + k / w) % ph) * pw + (c0 + k % w) % pw] * contrast)
                    .collect()
            }
        }
    }
}

fn stripes<R: Rng + ?Sized>(h: usize, w: usize, angle_deg: f64, period: f64, rng: &mut R) -> Vec<f64> {
    let (s, c) = angle_deg.to_radians().sin_cos();
    let phase = rng.random_range(0.0..period);
    (0..h * w)
        .map(|k| {
            let t = (k % w) as f64 * c + (k / w) as f64 * s + phase;
            if (t / period).rem_euclid(1.0) < 0.5 {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}

fn value_noise<R: Rng + ?Sized>(h: usize, w: usize, cell: usize, rng: &mut R) -> Vec<f64> {
    let gh = h / cell + 2;
    let gw = w / cell + 2;
    let grid: Vec<f64> = (0..gh * gw).map(|_| rng.random()).collect();
    let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
    (0..h * w)
        .map(|k| {
            let y = ((k / w) + oy) as f64 / cell as f64;
            let x = ((k % w) + ox) as f64 / cell as f64;
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            let g = |r: usize, c: usize| grid[r.min(gh - 1) * gw + c.min(gw - 1)];
            let top = g(y0, x0) * (1.0 - fx) + g(y0, x0 + 1) * fx;
            let bottom = g(y0 + 1, x0) * (1.0 - fx) + g(y0 + 1, x0 + 1) * fx;
            top * (1.0 - fy) + bottom * fy
        })
        .collect()
}

fn procedural<R: Rng + ?Sized>(class: usize, h: usize, w: usize, rng: &mut R) -> Vec<f64> {
    match class % TEXTURE_CLASSES {
        0 => stripes(h, w, 0.0, 4.0, rng),
        1 => stripes(h, w, 90.0, 4.0, rng),
        2 => stripes(h, w, 45.0, 5.0, rng),
        3 => stripes(h, w, 135.0, 5.0, rng),
        4 => stripes(h, w, 0.0, 10.0, rng),
        5 => {
            let (oy, ox) = (rng.random_range(0..6), rng.random_range(0..6));
            (0..h * w)
                .map(|k| (((k / w + oy) / 3 + (k % w + ox) / 3) % 2) as f64)
                .collect()
        }
        6 => {
            let (oy, ox) = (rng.random_range(0.0..5.0), rng.random_range(0.0..5.0));
            (0..h * w)
                .map(|k| {
                    let dy = ((k / w) as f64 + oy).rem_euclid(5.0) - 2.0;
                    let dx = ((k % w) as f64 + ox).rem_euclid(5.0) - 2.0;
                    if dy * dy + dx * dx <= 1.5 {
                        1.0
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        7 => value_noise(h, w, 2, rng),
        8 => value_noise(h, w, 5, rng),
        _ => value_noise(h, w, 10, rng),
    }
}
