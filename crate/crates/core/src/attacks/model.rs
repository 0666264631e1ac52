//! Model interfaces shared by the attacks.

use crate::bijective::{Bind, FullyInvertibleNet};
use crate::error::{Error, Result};
use crate::objectives::NuisanceClassifier;
use crate::tensor::{Tape, Tensor, Var};

/// Anything that maps a batch to class decisions.
pub trait Classifier {
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>>;
}

/// A differentiable model with logits; parameters are bound frozen.
pub trait LogitModel {
    fn logits_var<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>>;

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.logits_var(&tape, tape.constant(x.clone()))?.tensor())
    }

    /// Per-layer representations, for layer-level pre-image checks.
    fn layer_states(&self, _x: &Tensor) -> Result<Vec<Tensor>> {
        Err(Error::Unsupported(
            "layer-level pre-images need access to intermediate activations".into(),
        ))
    }
}

impl<T: LogitModel> Classifier for T {
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }
}

impl LogitModel for FullyInvertibleNet {
    fn logits_var<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let out = self.forward(tape, x, Bind::Frozen)?;
        Ok(self.split.split(out.z)?.0)
    }

    fn layer_states(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.intermediates(x)
    }
}

/// Decisions of a nuisance classifier reading the net's z_n.
pub struct NuisanceView<'a> {
    pub net: &'a FullyInvertibleNet,
    pub nc: &'a NuisanceClassifier,
}

impl Classifier for NuisanceView<'_> {
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        let (code, _) = self.net.encode(x)?;
        Ok(self.nc.log_probs(&code.zn)?.argmax_rows())
    }
}

/// Wraps a per-sample decision rule.
pub struct FnClassifier<F: Fn(&[f64]) -> usize>(pub F);

impl<F: Fn(&[f64]) -> usize> Classifier for FnClassifier<F> {
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok((0..x.batch()).map(|i| (self.0)(x.row(i))).collect())
    }
}

/// Fraction of correct decisions.
pub fn classifier_accuracy(c: &dyn Classifier, x: &Tensor, y: &[usize], chunk: usize) -> Result<f64> {
    let mut hits = 0;
    for start in (0..y.len()).step_by(chunk.max(1)) {
        let idx: Vec<usize> = (start..(start + chunk).min(y.len())).collect();
        let pred = c.predict(&x.select_rows(&idx))?;
        hits += pred.iter().zip(&idx).filter(|(p, &i)| **p == y[i]).count();
    }
    Ok(hits as f64 / y.len().max(1) as f64)
}
