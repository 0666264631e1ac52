//! Finite-difference oracles for checking analytic gradients.

use super::Tensor;

/// Central-difference gradient of a scalar function at `x`.
pub fn finite_difference_grad(mut f: impl FnMut(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    probe.requires_grad = false;
    probe.grad = None;
    let mut g = vec![0.0; x.numel()];
    for (i, gi) in g.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        *gi = (up - down) / (2.0 * h);
    }
    Tensor::new(x.shape(), g).expect("same shape as x")
}

/// Central-difference Jacobian, shape (outputs, inputs).
pub fn finite_difference_jacobian(mut f: impl FnMut(&Tensor) -> Tensor, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    probe.requires_grad = false;
    probe.grad = None;
    let n = x.numel();
    let m = f(&probe).numel();
    let mut jac = vec![0.0; m * n];
    for i in 0..n {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        for r in 0..m {
            jac[r * n + i] = (up.data()[r] - down.data()[r]) / (2.0 * h);
        }
    }
    Tensor::new(&[m, n], jac).expect("m x n")
}

/// Largest elementwise `|a - b| / max(|a|, |b|, floor)`.
///
/// The floor keeps near-zero entries from turning finite-difference noise
/// into huge ratios; 1e-4 is a good default for h = 1e-5.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len(), "compared gradients differ in length");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
