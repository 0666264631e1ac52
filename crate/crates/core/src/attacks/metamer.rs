//! Metamers: inputs that share logits but differ elsewhere.

use super::model::LogitModel;
use crate::bijective::{FullyInvertibleNet, LatentCode};
use crate::error::{Error, Result};
use crate::tensor::{Adam, Parameter, Tape, Tensor};

#[derive(Clone, Debug)]
pub struct MetamerResult {
    pub metamer: Tensor,
    /// Logits the metamer was built to match.
    pub target_logits: Tensor,
    pub achieved_logits: Tensor,
    /// Largest absolute logit deviation.
    pub semantic_residual: f64,
    /// Mean squared logit deviation.
    pub mse: f64,
    pub iterations: usize,
}

impl MetamerResult {
    fn measure(metamer: Tensor, target_logits: Tensor, achieved_logits: Tensor, iterations: usize) -> Result<Self> {
        let diff = achieved_logits.zip_map(&target_logits, |a, b| a - b)?;
        let mse = diff.data().iter().map(|d| d * d).sum::<f64>() / diff.numel() as f64;
        Ok(Self {
            semantic_residual: diff.data().iter().fold(0.0, |m, d| m.max(d.abs())),
            mse,
            metamer,
            target_logits,
            achieved_logits,
            iterations,
        })
    }

    /// Fraction of rows whose argmax agrees with the target logits.
    pub fn decision_agreement(&self) -> f64 {
        let a = self.achieved_logits.argmax_rows();
        let t = self.target_logits.argmax_rows();
        a.iter().zip(&t).filter(|(a, t)| a == t).count() as f64 / a.len().max(1) as f64
    }
}

fn same_batch(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

/// Exact metamer: z_s from `x_semantic`, z_n from `x_nuisance`, inverted.
pub fn metamer_exact(net: &FullyInvertibleNet, x_semantic: &Tensor, x_nuisance: &Tensor) -> Result<MetamerResult> {
    same_batch("metamer_exact", x_semantic, x_nuisance)?;
    let (sem, _) = net.encode(x_semantic)?;
    let (nui, _) = net.encode(x_nuisance)?;
    let code = LatentCode { zs: sem.zs.clone(), zn: nui.zn };
    let metamer = net.decode(&code)?;
    let achieved = net.logits(&metamer)?;
    MetamerResult::measure(metamer, sem.zs, achieved, 0)
}

/// Decodes z_s(x_semantic) with z_n moved linearly from x_semantic's own
/// nuisance (t = 0) to x_target's (t = 1), at `steps` evenly spaced t.
pub fn interpolate_nuisance(
    net: &FullyInvertibleNet,
    x_semantic: &Tensor,
    x_target: &Tensor,
    steps: usize,
) -> Result<Vec<Tensor>> {
    same_batch("interpolate_nuisance", x_semantic, x_target)?;
    if steps < 2 {
        return Err(Error::Config(format!("interpolation needs at least 2 steps, got {steps}")));
    }
    let (from, _) = net.encode(x_semantic)?;
    let (to, _) = net.encode(x_target)?;
    (0..steps)
        .map(|s| {
            let t = s as f64 / (steps - 1) as f64;
            let zn = from.zn.zip_map(&to.zn, |a, b| (1.0 - t) * a + t * b)?;
            net.decode(&LatentCode { zs: from.zs.clone(), zn })
        })
        .collect()
}

#[derive(Clone, Copy, Debug)]
pub struct GradientMetamerOptions {
    pub iterations: usize,
    pub lr: f64,
}

impl Default for GradientMetamerOptions {
    fn default() -> Self {
        Self { iterations: 3000, lr: 0.01 }
    }
}

/// Gradient metamer: starting from `x_init`, Adam on the input minimizes the
/// mean squared difference between its logits and those of `x_semantic`.
pub fn metamer_gradient(
    model: &dyn LogitModel,
    x_semantic: &Tensor,
    x_init: &Tensor,
    opts: GradientMetamerOptions,
) -> Result<MetamerResult> {
    same_batch("metamer_gradient", x_semantic, x_init)?;
    let target = model.logits(x_semantic)?;
    let mut input = Parameter::new(x_init.clone());
    let mut opt = Adam::new(opts.lr);
    for _ in 0..opts.iterations {
        let tape = Tape::new();
        let x = tape.param(&input);
        let logits = model.logits_var(&tape, x)?;
        let loss = logits.sub(tape.constant(target.clone()))?.square().mean_all();
        let grads = tape.backward(loss)?;
        grads.store(vec![&mut input]);
        opt.step(&mut [&mut input])?;
    }
    let achieved = model.logits(&input.value)?;
    MetamerResult::measure(input.value, target, achieved, opts.iterations)
}
