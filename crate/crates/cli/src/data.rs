//! Dataset construction from a config.

use std::path::PathBuf;

use invlens_core::attacks::adversarial_last_coordinate;
use invlens_core::datagen::{
    augment_shift, dequantize, load_mnist, make_binary_shift, make_texture_shift, Coupling, LabeledBatch, SpheresSpec,
    TextureBank, MASK_THRESHOLD,
};
use invlens_core::rng::{derive_seed, rng_for, Rng};
use invlens_core::Tensor;

use crate::config::Config;
use crate::error::{CliError, Result};

#[derive(Clone, Debug)]
pub struct Splits {
    pub train: LabeledBatch,
    pub test_clean: LabeledBatch,
    /// Shortcut-free or x_d-adjusted test data, where the dataset has one.
    pub test_adv: Option<LabeledBatch>,
    pub classes: usize,
    /// Shape of one sample.
    pub sample_shape: Vec<usize>,
    pub spheres: Option<SpheresSpec>,
    pub dequantize: bool,
    pub augment_shift: i64,
    /// (c, h, w) of image datasets, also when samples are stored flat.
    pub image: Option<[usize; 3]>,
}

impl Splits {
    /// Turns a gathered training batch into network input.
    pub fn prepare(&self, x: Tensor, rng: &mut Rng) -> invlens_core::Result<Tensor> {
        let x = match self.image {
            Some([c, h, w]) if self.augment_shift > 0 => {
                let shape = x.shape().to_vec();
                augment_shift(&x.reshape(&[x.batch(), c, h, w])?, self.augment_shift, rng).reshape(&shape)?
            }
            _ => x,
        };
        Ok(if self.dequantize { dequantize(&x, rng) } else { x })
    }

    pub fn named(&self) -> Vec<(&'static str, &LabeledBatch)> {
        let mut v = vec![("train", &self.train), ("test_clean", &self.test_clean)];
        if let Some(a) = &self.test_adv {
            v.push(("test_adv", a));
        }
        v
    }
}

pub fn spheres_spec(cfg: &Config) -> SpheresSpec {
    SpheresSpec {
        d: cfg.usize("spheres.d"),
        r1: cfg.f64("spheres.r1"),
        r2: cfg.f64("spheres.r2"),
        n_train: cfg.usize("spheres.n_train"),
        n_test: cfg.usize("spheres.n_test"),
        seed: derive_seed(cfg.seed(), "data"),
    }
}

/// `mnist.dir`, else `$INVLENS_DATA_DIR`, else `data/mnist`.
pub fn mnist_dir(cfg: &Config) -> PathBuf {
    match cfg.str("mnist.dir") {
        "" => std::env::var_os("INVLENS_DATA_DIR").map_or_else(|| PathBuf::from("data/mnist"), PathBuf::from),
        d => PathBuf::from(d),
    }
}

fn mnist(cfg: &Config) -> Result<(LabeledBatch, LabeledBatch)> {
    let dir = mnist_dir(cfg);
    let load = |train: bool| {
        load_mnist(&dir, train).map_err(|e| {
            CliError::Runtime(format!("cannot load MNIST from {} (set INVLENS_DATA_DIR): {e}", dir.display()))
        })
    };
    let (train, test) = (load(true)?, load(false)?);
    let cap = |b: LabeledBatch, n: usize| if n > 0 && n < b.len() { b.take(n) } else { b };
    Ok((cap(train, cfg.usize("mnist.n_train")), cap(test, cfg.usize("mnist.n_test"))))
}

fn texture_bank(cfg: &Config) -> Result<TextureBank> {
    let contrast = cfg.f64("shift.contrast");
    Ok(match cfg.str("shift.textures") {
        "procedural" => TextureBank::procedural(contrast),
        dir => TextureBank::from_dir(std::path::Path::new(dir), contrast)?,
    })
}

pub fn load_splits(cfg: &Config) -> Result<Splits> {
    let dataset = cfg.str("experiment.dataset");
    let mut rng = rng_for(cfg.seed(), "data/shift");
    let flat = cfg.layout() == "dense";
    let image = |train: LabeledBatch, test_clean: LabeledBatch, test_adv: Option<LabeledBatch>| {
        let s = train.inputs.shape().to_vec();
        let mut splits = Splits {
            sample_shape: s[1..].to_vec(),
            train,
            test_clean,
            test_adv,
            classes: 10,
            spheres: None,
            dequantize: cfg.bool("mnist.dequantize"),
            augment_shift: cfg.usize("mnist.augment_shift") as i64,
            image: Some([s[1], s[2], s[3]]),
        };
        if flat {
            let dim = s[1] * s[2] * s[3];
            let flatten = |b: &mut LabeledBatch| b.inputs = b.inputs.reshape(&[b.len(), dim]).expect("same size");
            flatten(&mut splits.train);
            flatten(&mut splits.test_clean);
            if let Some(a) = splits.test_adv.as_mut() {
                flatten(a);
            }
            splits.sample_shape = vec![dim];
        }
        splits
    };
    match dataset {
        "spheres" => {
            let spec = spheres_spec(cfg);
            let (train, test_clean) = (spec.train()?, spec.test()?);
            let adv = adversarial_last_coordinate(&test_clean, &spec)?;
            Ok(Splits {
                sample_shape: vec![spec.d],
                train,
                test_clean,
                test_adv: Some(adv.batch),
                classes: 2,
                spheres: Some(spec),
                dequantize: false,
                augment_shift: 0,
                image: None,
            })
        }
        "mnist" => {
            let (train, test) = mnist(cfg)?;
            Ok(image(train, test, None))
        }
        "shiftmnist-binary" => {
            let (train, test) = mnist(cfg)?;
            let (train, _) = make_binary_shift(&train, Coupling::Planted, &mut rng)?;
            let (clean, _) = make_binary_shift(&test, Coupling::Planted, &mut rng)?;
            let (adv, _) = make_binary_shift(&test, Coupling::Removed, &mut rng)?;
            Ok(image(train, clean, Some(adv)))
        }
        "shiftmnist-texture" => {
            let (train, test) = mnist(cfg)?;
            let bank = texture_bank(cfg)?;
            let (train, _) = make_texture_shift(&train, Coupling::Planted, &bank, MASK_THRESHOLD, &mut rng)?;
            let (clean, _) = make_texture_shift(&test, Coupling::Planted, &bank, MASK_THRESHOLD, &mut rng)?;
            let (adv, _) = make_texture_shift(&test, Coupling::Randomized, &bank, MASK_THRESHOLD, &mut rng)?;
            Ok(image(train, clean, Some(adv)))
        }
        other => Err(CliError::Config(format!("unknown dataset {other}"))),
    }
}
