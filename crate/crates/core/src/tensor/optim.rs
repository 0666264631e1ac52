//! First-order optimizers operating on [`Parameter`] grad slots.

use std::collections::HashMap;

use super::param::{ParamId, Parameter};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

impl std::str::FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(Self::Adam),
            "sgd" | "sgd-momentum" => Ok(Self::SgdMomentum),
            other => Err(Error::Config(format!(
                "unknown optimizer {other:?} (expected one of: adam, sgd-momentum)"
            ))),
        }
    }
}

fn buffer<'a>(map: &'a mut HashMap<ParamId, Vec<f64>>, p: &Parameter) -> Result<&'a mut Vec<f64>> {
    let n = p.value.numel();
    let buf = map.entry(p.id()).or_insert_with(|| vec![0.0; n]);
    if buf.len() != n {
        return Err(Error::OptimizerMismatch(format!(
            "parameter {:?} has {n} values but its moment buffer has {}",
            p.id(),
            buf.len()
        )));
    }
    Ok(buf)
}

fn grad_of(p: &Parameter, index: usize) -> Result<&[f64]> {
    p.value.grad.as_deref().ok_or(Error::MissingGrad { index })
}

/// Adam with bias-corrected moments. Optional L2 decay is added to the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: u64,
    m: HashMap<ParamId, Vec<f64>>,
    v: HashMap<ParamId, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
            t: 0,
            m: HashMap::new(),
            v: HashMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            grad_of(p, i)?;
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grad_of(p, i)?.to_vec();
            let m = buffer(&mut self.m, p)?;
            let v = buffer(&mut self.v, p)?;
            for (k, x) in p.value.data_mut().iter_mut().enumerate() {
                let gk = g[k] + self.weight_decay * *x;
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

/// SGD with heavy-ball momentum: `b = μ·b + g; x -= lr·b`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    t: u64,
    buf: HashMap<ParamId, Vec<f64>>,
}

impl SgdMomentum {
    pub fn new(lr: f64, momentum: f64) -> Self {
        Self {
            lr,
            momentum,
            weight_decay: 0.0,
            t: 0,
            buf: HashMap::new(),
        }
    }

    pub fn with_weight_decay(mut self, wd: f64) -> Self {
        self.weight_decay = wd;
        self
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            grad_of(p, i)?;
        }
        self.t += 1;
        for (i, p) in params.iter_mut().enumerate() {
            let g = grad_of(p, i)?.to_vec();
            let b = buffer(&mut self.buf, p)?;
            for (k, x) in p.value.data_mut().iter_mut().enumerate() {
                b[k] = self.momentum * b[k] + g[k] + self.weight_decay * *x;
                *x -= self.lr * b[k];
            }
        }
        Ok(())
    }
}

/// Either optimizer behind one interface.
#[derive(Clone, Debug)]
pub enum Optimizer {
    Adam(Adam),
    Sgd(SgdMomentum),
}

impl Optimizer {
    /// Builds an optimizer with default hyperparameters (momentum 0.9 for SGD).
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        match kind {
            OptimizerKind::Adam => Self::Adam(Adam::new(lr)),
            OptimizerKind::SgdMomentum => Self::Sgd(SgdMomentum::new(lr, 0.9)),
        }
    }

    pub fn kind(&self) -> OptimizerKind {
        match self {
            Self::Adam(_) => OptimizerKind::Adam,
            Self::Sgd(_) => OptimizerKind::SgdMomentum,
        }
    }

    pub fn lr(&self) -> f64 {
        match self {
            Self::Adam(a) => a.lr,
            Self::Sgd(s) => s.lr,
        }
    }

    pub fn set_lr(&mut self, lr: f64) {
        match self {
            Self::Adam(a) => a.lr = lr,
            Self::Sgd(s) => s.lr = lr,
        }
    }

    pub fn steps(&self) -> u64 {
        match self {
            Self::Adam(a) => a.steps(),
            Self::Sgd(s) => s.steps(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Parameter]) -> Result<()> {
        match self {
            Self::Adam(a) => a.step(params),
            Self::Sgd(s) => s.step(params),
        }
    }
}
