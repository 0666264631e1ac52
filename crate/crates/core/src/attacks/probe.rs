//! Post-hoc nuisance probe: a fresh classifier trained on frozen z_n.

use rand::Rng;

use crate::bijective::{Bind, FullyInvertibleNet};
use crate::datagen::LabeledBatch;
use crate::error::Result;
use crate::objectives::{accuracy, mi_lower_bound, minibatches, picked_log_prob, NuisanceClassifier};
use crate::tensor::{Optimizer, OptimizerKind, Tape, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct ProbeOptions {
    pub hidden: usize,
    pub layers: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self { hidden: 256, layers: 3, epochs: 20, batch_size: 128, lr: 1e-3 }
    }
}

#[derive(Clone, Debug)]
pub struct ProbeReport {
    pub train_error: f64,
    pub test_error: f64,
    /// Variational MI bound on the test split, in nats.
    pub mi_lower_bound: f64,
    pub probe: NuisanceClassifier,
}

/// Nuisance codes of a batch, computed in chunks.
pub fn nuisance_codes(net: &FullyInvertibleNet, x: &Tensor, chunk: usize) -> Result<Tensor> {
    let mut parts = Vec::new();
    for start in (0..x.batch()).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(x.batch())).collect();
        parts.push(net.encode(&x.select_rows(&idx))?.0.zn);
    }
    Tensor::stack_rows(&parts.iter().collect::<Vec<_>>())
}

/// Trains a probe on (z_n, y) pairs given directly as features.
pub fn train_probe_on_features<R: Rng + ?Sized>(
    train_x: &Tensor,
    train_y: &[usize],
    test_x: &Tensor,
    test_y: &[usize],
    classes: usize,
    opts: ProbeOptions,
    rng: &mut R,
) -> Result<ProbeReport> {
    let mut probe = NuisanceClassifier::new(train_x.row_len(), opts.hidden, opts.layers, classes, rng)?;
    let mut opt = Optimizer::new(OptimizerKind::Adam, opts.lr);
    for _ in 0..opts.epochs {
        for idx in minibatches(train_y.len(), opts.batch_size, rng) {
            let y: Vec<usize> = idx.iter().map(|&i| train_y[i]).collect();
            let tape = Tape::new();
            let lp = probe.forward(&tape, tape.constant(train_x.select_rows(&idx)), Bind::Train)?;
            let loss = picked_log_prob(lp, &y)?.mean_all().neg();
            let grads = tape.backward(loss)?;
            let mut params = probe.params_mut();
            grads.store(params.iter_mut().map(|p| &mut **p).collect());
            opt.step(&mut params)?;
        }
    }
    let train_lp = probe.log_probs(train_x)?;
    let test_lp = probe.log_probs(test_x)?;
    Ok(ProbeReport {
        train_error: 1.0 - accuracy(&train_lp, train_y),
        test_error: 1.0 - accuracy(&test_lp, test_y),
        mi_lower_bound: mi_lower_bound(&test_lp, test_y)?.value,
        probe,
    })
}

/// Trains a fresh nuisance classifier on the frozen net's z_n. The net is
/// only read; no gradient reaches it.
pub fn train_posthoc_nuisance_probe<R: Rng + ?Sized>(
    net: &FullyInvertibleNet,
    train: &LabeledBatch,
    test: &LabeledBatch,
    opts: ProbeOptions,
    rng: &mut R,
) -> Result<ProbeReport> {
    let train_z = nuisance_codes(net, &train.inputs, 256)?;
    let test_z = nuisance_codes(net, &test.inputs, 256)?;
    train_probe_on_features(&train_z, &train.labels, &test_z, &test.labels, net.classes(), opts, rng)
}
