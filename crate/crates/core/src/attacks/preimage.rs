//! Membership tests for pre-images at different levels of a model.

use super::model::LogitModel;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PreimageLevel {
    /// The representation after layer `i` (0-based).
    Layer(usize),
    Logit,
    Argmax,
}

/// Whether each row of `x` lies in the pre-image of the matching row of
/// `x_star` at `level`, up to `tol` in max-abs distance.
pub fn preimage_membership(
    model: &dyn LogitModel,
    x: &Tensor,
    x_star: &Tensor,
    level: PreimageLevel,
    tol: f64,
) -> Result<Vec<bool>> {
    if x.shape() != x_star.shape() {
        return Err(Error::shape("preimage_membership", x.shape(), x_star.shape()));
    }
    let close = |a: &Tensor, b: &Tensor| -> Vec<bool> {
        (0..a.batch())
            .map(|i| a.row(i).iter().zip(b.row(i)).all(|(p, q)| (p - q).abs() <= tol))
            .collect()
    };
    match level {
        PreimageLevel::Layer(i) => {
            let a = model.layer_states(x)?;
            let b = model.layer_states(x_star)?;
            if i >= a.len() {
                return Err(Error::Config(format!(
                    "layer index {i} out of range; the model has {} layers",
                    a.len()
                )));
            }
            Ok(close(&a[i], &b[i]))
        }
        PreimageLevel::Logit => Ok(close(&model.logits(x)?, &model.logits(x_star)?)),
        PreimageLevel::Argmax => {
            let a = model.logits(x)?.argmax_rows();
            let b = model.logits(x_star)?.argmax_rows();
            Ok(a.iter().zip(&b).map(|(p, q)| p == q).collect())
        }
    }
}
