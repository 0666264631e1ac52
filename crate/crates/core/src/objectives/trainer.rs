//! Cross-entropy and alternating independence cross-entropy training steps.

use rand::seq::SliceRandom;
use rand::Rng;

use super::losses::{accuracy, mi_lower_bound, nuisance_cross_entropy, semantic_cross_entropy};
use super::models::{mle_nuisance, GaussianPrior, NuisanceClassifier};
use crate::bijective::{Bind, FullyInvertibleNet};
use crate::error::{Error, Result};
use crate::tensor::{Optimizer, Parameter, Tape, Tensor};

/// Loss values of one training step. Terms a run does not compute are NaN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossReport {
    pub sce: f64,
    pub nce: f64,
    pub mle_n: f64,
    /// `sCE + lambda_n nCE + lambda_m MLE_n`, minimized over the network.
    pub total_min: f64,
    /// `nCE`, maximized over the nuisance classifier.
    pub total_max: f64,
    /// Clamped at zero.
    pub mi_lower_bound: f64,
    pub mi_raw: f64,
    pub semantic_acc: f64,
    pub nuisance_acc: f64,
}

impl LossReport {
    /// A report for plain cross-entropy training.
    pub fn cross_entropy(sce: f64, semantic_acc: f64) -> Self {
        Self {
            sce,
            nce: f64::NAN,
            mle_n: f64::NAN,
            total_min: sce,
            total_max: f64::NAN,
            mi_lower_bound: f64::NAN,
            mi_raw: f64::NAN,
            semantic_acc,
            nuisance_acc: f64::NAN,
        }
    }

    pub fn all_finite(&self) -> bool {
        [self.sce, self.nce, self.mle_n, self.total_min, self.total_max, self.mi_lower_bound]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn store_and_step(grads: &crate::tensor::Gradients, opt: &mut Optimizer, mut params: Vec<&mut Parameter>) -> Result<()> {
    grads.store(params.iter_mut().map(|p| &mut **p).collect());
    opt.step(&mut params)
}

/// One plain cross-entropy step on the logits z_s.
pub fn ce_step(net: &mut FullyInvertibleNet, opt: &mut Optimizer, x: &Tensor, y: &[usize]) -> Result<LossReport> {
    let tape = Tape::new();
    let out = net.forward(&tape, tape.constant(x.clone()), Bind::Train)?;
    let (zs, _) = net.split.split(out.z)?;
    let sce = semantic_cross_entropy(zs, y)?;
    let report = LossReport::cross_entropy(sce.value().item(), accuracy(&zs.tensor(), y));
    let grads = tape.backward(sce)?;
    store_and_step(&grads, opt, net.params_mut())?;
    Ok(report)
}

/// Loss weights and alternation schedule.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IceWeights {
    pub lambda_n: f64,
    pub lambda_m: f64,
    /// Nuisance-classifier updates per network update.
    pub k_nc: usize,
}

impl Default for IceWeights {
    fn default() -> Self {
        Self {
            lambda_n: 1.0,
            lambda_m: 1.0,
            k_nc: 1,
        }
    }
}

/// State of the min-max game besides the network itself.
#[derive(Clone, Debug)]
pub struct IceTrainer {
    pub nc: NuisanceClassifier,
    pub prior: GaussianPrior,
    pub nc_opt: Optimizer,
    pub weights: IceWeights,
    /// Network steps over which lambda_n ramps linearly up from zero; 0 is off.
    pub warmup_steps: usize,
    steps: usize,
}

impl IceTrainer {
    pub fn new(nc: NuisanceClassifier, prior: GaussianPrior, nc_opt: Optimizer, weights: IceWeights) -> Result<Self> {
        if weights.lambda_n < 0.0 || weights.lambda_m < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if nc.input_dim() != prior.dim() {
            return Err(Error::shape("ice trainer", &[nc.input_dim()], &[prior.dim()]));
        }
        Ok(Self {
            nc,
            prior,
            nc_opt,
            weights,
            warmup_steps: 0,
            steps: 0,
        })
    }

    pub fn with_warmup(mut self, steps: usize) -> Self {
        self.warmup_steps = steps;
        self
    }

    /// lambda_n for the next network step.
    pub fn current_lambda_n(&self) -> f64 {
        match self.warmup_steps {
            0 => self.weights.lambda_n,
            w => self.weights.lambda_n * ((self.steps + 1) as f64 / w as f64).min(1.0),
        }
    }

    /// Ascends nCE in the classifier parameters on fixed nuisances.
    pub fn nc_step(&mut self, zn: &Tensor, y: &[usize]) -> Result<f64> {
        let tape = Tape::new();
        let lp = self.nc.forward(&tape, tape.constant(zn.clone()), Bind::Train)?;
        let nce = nuisance_cross_entropy(lp, y, zn.shape()[1])?;
        let value = nce.value().item();
        let grads = tape.backward(nce.neg())?;
        store_and_step(&grads, &mut self.nc_opt, self.nc.params_mut())?;
        Ok(value)
    }

    /// `k_nc` classifier updates on the detached nuisances, then one update
    /// of the network and prior on the weighted total.
    pub fn step(&mut self, net: &mut FullyInvertibleNet, theta_opt: &mut Optimizer, x: &Tensor, y: &[usize]) -> Result<LossReport> {
        let w = IceWeights {
            lambda_n: self.current_lambda_n(),
            ..self.weights
        };
        self.steps += 1;
        let tape = Tape::new();
        let out = net.forward(&tape, tape.constant(x.clone()), Bind::Train)?;
        let (zs, zn) = net.split.split(out.z)?;
        let zn_fixed = zn.tensor();
        for _ in 0..w.k_nc {
            self.nc_step(&zn_fixed, y)?;
        }
        let d_n = net.split.nuisance_dim();
        let sce = semantic_cross_entropy(zs, y)?;
        let lp = self.nc.forward(&tape, zn, Bind::Frozen)?;
        let nce = nuisance_cross_entropy(lp, y, d_n)?;
        let mle = mle_nuisance(zn, out.logdet, &self.prior, Bind::Train)?;
        // zero-weight terms stay off the graph so the ablation is exact
        let mut total = sce;
        if w.lambda_n != 0.0 {
            total = total.add(nce.scale(w.lambda_n))?;
        }
        if w.lambda_m != 0.0 {
            total = total.add(mle.scale(w.lambda_m))?;
        }
        let lp_t = lp.tensor();
        let bound = mi_lower_bound(&lp_t, y)?;
        let (sv, nv, mv) = (sce.value().item(), nce.value().item(), mle.value().item());
        let report = LossReport {
            sce: sv,
            nce: nv,
            mle_n: mv,
            total_min: sv + w.lambda_n * nv + w.lambda_m * mv,
            total_max: nv,
            mi_lower_bound: bound.value,
            mi_raw: bound.raw,
            semantic_acc: accuracy(&zs.tensor(), y),
            nuisance_acc: accuracy(&lp_t, y),
        };
        let grads = tape.backward(total)?;
        let mut params = net.params_mut();
        params.extend(self.prior.params_mut());
        store_and_step(&grads, theta_opt, params)?;
        Ok(report)
    }
}

/// Which objective a run trains.
#[derive(Clone, Debug)]
pub enum Objective {
    CrossEntropy,
    Ice(Box<IceTrainer>),
}

impl Objective {
    pub fn step(&mut self, net: &mut FullyInvertibleNet, opt: &mut Optimizer, x: &Tensor, y: &[usize]) -> Result<LossReport> {
        match self {
            Objective::CrossEntropy => ce_step(net, opt, x, y),
            Objective::Ice(t) => t.step(net, opt, x, y),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Objective::CrossEntropy => "ce",
            Objective::Ice(_) => "ice",
        }
    }
}

/// Shuffled minibatch index lists covering `0..n`; the last may be short.
pub fn minibatches<R: Rng + ?Sized>(n: usize, batch: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch.max(1)).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning-rate multiplier applied at each epoch boundary.
    pub lr_decay: f64,
}

/// Runs minibatch training. `prepare` turns the gathered raw batch into
/// network input (dequantization, augmentation); `on_step` sees every report.
#[allow(clippy::too_many_arguments)]
pub fn train<R: Rng + ?Sized>(
    net: &mut FullyInvertibleNet,
    objective: &mut Objective,
    opt: &mut Optimizer,
    data: &Tensor,
    labels: &[usize],
    opts: TrainOptions,
    rng: &mut R,
    mut prepare: impl FnMut(Tensor, &mut R) -> Result<Tensor>,
    mut on_step: impl FnMut(usize, &LossReport) -> Result<()>,
) -> Result<()> {
    if data.batch() != labels.len() {
        return Err(Error::shape("train", &[data.batch()], &[labels.len()]));
    }
    let mut step = 0;
    for _ in 0..opts.epochs {
        for idx in minibatches(labels.len(), opts.batch_size, rng) {
            let x = prepare(data.select_rows(&idx), rng)?;
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let report = objective.step(net, opt, &x, &y)?;
            on_step(step, &report)?;
            step += 1;
        }
        let lr = opt.lr() * opts.lr_decay;
        opt.set_lr(lr);
    }
    Ok(())
}
