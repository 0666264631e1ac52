//! Loss terms of the independence cross-entropy objective.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub(crate) fn check_labels(y: &[usize], n: usize, classes: usize) -> Result<()> {
    if y.len() != n {
        return Err(Error::shape("labels", &[y.len()], &[n]));
    }
    if let Some(&bad) = y.iter().find(|&&l| l >= classes) {
        return Err(Error::Label { label: bad, classes });
    }
    Ok(())
}

/// (N, C) one-hot matrix.
pub fn one_hot(y: &[usize], classes: usize) -> Result<Tensor> {
    check_labels(y, y.len(), classes)?;
    let mut t = vec![0.0; y.len() * classes];
    for (i, &l) in y.iter().enumerate() {
        t[i * classes + l] = 1.0;
    }
    Tensor::new(&[y.len(), classes], t)
}

/// Per-sample log-probability of the true label, (N,).
pub fn picked_log_prob<'t>(log_probs: Var<'t>, y: &[usize]) -> Result<Var<'t>> {
    let s = log_probs.shape();
    if s.len() != 2 {
        return Err(Error::shape("picked_log_prob", &s, &[y.len(), 0]));
    }
    check_labels(y, s[0], s[1])?;
    let mask = log_probs.tape().constant(one_hot(y, s[1])?);
    log_probs.mul(mask)?.sum(1)
}

/// Mean over the batch of `-log softmax(z_s)[y]`, via logsumexp.
pub fn semantic_cross_entropy<'t>(zs: Var<'t>, y: &[usize]) -> Result<Var<'t>> {
    let s = zs.shape();
    if s.len() != 2 {
        return Err(Error::shape("semantic_cross_entropy", &s, &[y.len(), 0]));
    }
    check_labels(y, s[0], s[1])?;
    let mask = zs.tape().constant(one_hot(y, s[1])?);
    let picked = zs.mul(mask)?.sum(1)?;
    Ok(zs.logsumexp(1)?.sub(picked)?.mean_all())
}

/// Mean over the batch of `+log D(z_n)[y]`, divided by the nuisance dimension.
/// `log_probs` are the nuisance classifier's (N, C) log-probabilities.
pub fn nuisance_cross_entropy<'t>(log_probs: Var<'t>, y: &[usize], nuisance_dim: usize) -> Result<Var<'t>> {
    Ok(picked_log_prob(log_probs, y)?.mean_all().scale(1.0 / nuisance_dim as f64))
}

/// Entropy (nats) of the empirical label distribution.
pub fn label_entropy(y: &[usize], classes: usize) -> f64 {
    let mut counts = vec![0usize; classes];
    for &l in y {
        counts[l] += 1;
    }
    let n = y.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Variational lower bound on I(y; z_n): `h(y) + mean log D(z_n)[y]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MiBound {
    /// Clamped below at zero for reporting.
    pub value: f64,
    pub raw: f64,
}

/// Bound from the classifier's (N, C) log-probabilities.
pub fn mi_lower_bound(log_probs: &Tensor, y: &[usize]) -> Result<MiBound> {
    let classes = log_probs.shape()[1];
    check_labels(y, log_probs.batch(), classes)?;
    let mean_log: f64 = y.iter().enumerate().map(|(i, &l)| log_probs.row(i)[l]).sum::<f64>() / y.len() as f64;
    let raw = label_entropy(y, classes) + mean_log;
    Ok(MiBound { value: raw.max(0.0), raw })
}

/// Fraction of rows whose argmax equals the label.
pub fn accuracy(scores: &Tensor, y: &[usize]) -> f64 {
    let hits = scores.argmax_rows().iter().zip(y).filter(|(p, l)| p == l).count();
    hits as f64 / y.len().max(1) as f64
}

/// Plain-tensor sCE, for evaluation.
pub fn semantic_cross_entropy_value(zs: &Tensor, y: &[usize]) -> Result<f64> {
    let tape = Tape::new();
    Ok(semantic_cross_entropy(tape.constant(zs.clone()), y)?.value().item())
}
