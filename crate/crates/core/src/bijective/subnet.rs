//! Non-invertible inner networks used by the coupling layers.

use rand::Rng;

use crate::error::Result;
use crate::tensor::{Parameter, Tape, Tensor, Var};

/// How parameters are placed on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bind {
    /// Gradients flow into the parameters.
    Train,
    /// Parameters are constants; use for inference and input-gradient attacks.
    Frozen,
}

pub(crate) fn bind<'t>(tape: &'t Tape, p: &Parameter, mode: Bind) -> Var<'t> {
    match mode {
        Bind::Train => tape.param(p),
        Bind::Frozen => tape.frozen(p),
    }
}

fn he<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Parameter {
    Parameter::new(Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng))
}

fn zeros(shape: &[usize]) -> Parameter {
    Parameter::new(Tensor::zeros(shape))
}

/// Two hidden ReLU layers; the output layer starts at zero so the owning
/// coupling starts as the identity.
#[derive(Clone, Debug)]
pub enum Subnet {
    /// (N, in) -> (N, out) with weights stored as (in, out).
    Dense { w: [Parameter; 3], b: [Parameter; 3] },
    /// (N, in, H, W) -> (N, out, H, W): 3x3, 1x1, 3x3 convolutions.
    Conv { w: [Parameter; 3], b: [Parameter; 3] },
}

impl Subnet {
    pub fn dense<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Subnet::Dense {
            w: [
                he(&[input, hidden], input, rng),
                he(&[hidden, hidden], hidden, rng),
                zeros(&[hidden, output]),
            ],
            b: [zeros(&[hidden]), zeros(&[hidden]), zeros(&[output])],
        }
    }

    pub fn conv<R: Rng + ?Sized>(input: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        Subnet::Conv {
            w: [
                he(&[hidden, input, 3, 3], input * 9, rng),
                he(&[hidden, hidden, 1, 1], hidden, rng),
                zeros(&[output, hidden, 3, 3]),
            ],
            b: [zeros(&[hidden]), zeros(&[hidden]), zeros(&[output])],
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, mode: Bind) -> Result<Var<'t>> {
        match self {
            Subnet::Dense { w, b } => {
                let mut h = x;
                for i in 0..3 {
                    h = h.matmul(bind(tape, &w[i], mode))?.add(bind(tape, &b[i], mode))?;
                    if i < 2 {
                        h = h.relu();
                    }
                }
                Ok(h)
            }
            Subnet::Conv { w, b } => {
                let mut h = x;
                for i in 0..3 {
                    h = h.conv2d(bind(tape, &w[i], mode), Some(bind(tape, &b[i], mode)))?;
                    if i < 2 {
                        h = h.relu();
                    }
                }
                Ok(h)
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        let (Subnet::Dense { w, b } | Subnet::Conv { w, b }) = self;
        (0..3)
            .flat_map(|i| [(format!("w{i}"), &w[i]), (format!("b{i}"), &b[i])])
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        let (Subnet::Dense { w, b } | Subnet::Conv { w, b }) = self;
        w.iter_mut()
            .zip(b.iter_mut())
            .enumerate()
            .flat_map(|(i, (w, b))| [(format!("w{i}"), w), (format!("b{i}"), b)])
            .collect()
    }
}
