//! Analytic gradients against central finite differences.

use invlens_core::rng::rng_from_seed;
use invlens_core::tensor::{finite_difference_grad, max_relative_error, logabsdet};
use invlens_core::{Error, Tape, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

const H: f64 = 1e-5;
const FLOOR: f64 = 1e-4;
const OPS: usize = 17;

/// A graph recipe: the leaf tensors and the op chosen at each depth.
struct Graph {
    leaves: Vec<Tensor>,
    ops: Vec<usize>,
    readout: Tensor,
}

impl Graph {
    fn random(seed: u64, depth: usize, forced: Option<usize>) -> Self {
        let mut rng = rng_from_seed(seed);
        let mut leaves = vec![Tensor::randn(&[2, 3], 1.0, &mut rng)];
        let mut ops = Vec::new();
        for _ in 0..depth {
            let op = forced.unwrap_or_else(|| rng.random_range(0..OPS));
            ops.push(op);
            // every op gets its own auxiliary leaves, used or not
            leaves.push(Tensor::randn(&[2, 3], 1.0, &mut rng));
            leaves.push(Tensor::randn(&[3, 3], 0.6, &mut rng));
            leaves.push(Tensor::randn(&[3], 1.0, &mut rng));
        }
        // keep the 3x3 leaves comfortably invertible
        for (i, l) in leaves.iter_mut().enumerate() {
            if i % 3 == 2 {
                for d in 0..3 {
                    l.data_mut()[d * 4] += 2.0;
                }
            }
        }
        let readout = Tensor::randn(&[2, 3], 1.0, &mut rng);
        Self { leaves, ops, readout }
    }

    fn numel(&self) -> usize {
        self.leaves.iter().map(Tensor::numel).sum()
    }

    fn unflatten(&self, flat: &[f64]) -> Vec<Tensor> {
        let mut at = 0;
        self.leaves
            .iter()
            .map(|l| {
                let t = Tensor::new(l.shape(), flat[at..at + l.numel()].to_vec()).unwrap();
                at += l.numel();
                t
            })
            .collect()
    }

    fn build<'t>(&self, tape: &'t Tape, leaves: &[Var<'t>]) -> Var<'t> {
        let mut x = leaves[0];
        for (k, &op) in self.ops.iter().enumerate() {
            let y = leaves[1 + 3 * k];
            let w = leaves[2 + 3 * k];
            let b = leaves[3 + 3 * k];
            x = apply(tape, op, x, y, w, b).unwrap();
        }
        x.mul(tape.constant(self.readout.clone())).unwrap().sum_all()
    }

    fn value(&self, flat: &Tensor) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = self.unflatten(flat.data()).into_iter().map(|t| tape.constant(t)).collect();
        self.build(&tape, &vars).value().item()
    }

    fn analytic(&self) -> Vec<f64> {
        let tape = Tape::new();
        let vars: Vec<Var> = self.leaves.iter().map(|t| tape.variable(t.clone())).collect();
        let loss = self.build(&tape, &vars);
        let g = tape.backward(loss).unwrap();
        vars.iter().flat_map(|v| g.wrt(v).unwrap().into_data()).collect()
    }

    fn check(&self) -> f64 {
        let flat = Tensor::from_vec(self.leaves.iter().flat_map(|l| l.data().to_vec()).collect());
        assert_eq!(flat.numel(), self.numel());
        let fd = finite_difference_grad(|t| self.value(t), &flat, H);
        max_relative_error(&self.analytic(), fd.data(), FLOOR)
    }
}

/// Shape-preserving (2, 3) -> (2, 3) building blocks covering every primitive.
fn apply<'t>(tape: &'t Tape, op: usize, x: Var<'t>, y: Var<'t>, w: Var<'t>, b: Var<'t>) -> invlens_core::Result<Var<'t>> {
    Ok(match op {
        0 => x.add(y)?.sub(b)?,
        1 => x.mul(y)?.scale(0.7),
        2 => x.div(y.softplus().add_scalar(0.5))?,
        3 => x.matmul(w)?.scale(0.5),
        4 => x.scale(0.3).exp().add(b.neg())?,
        5 => x.softplus().add_scalar(0.1).log()?,
        6 => x.relu().add(y.scale(0.1))?,
        7 => x.softmax(1)?.add(x.scale(0.2))?,
        8 => x.log_softmax(0)?,
        9 => x.sub(x.logsumexp(1)?.reshape(&[2, 1])?)?,
        10 => x.add(x.mean(0)?.reshape(&[1, 3])?)?.add(x.sum(1)?.reshape(&[2, 1])?.scale(0.1))?,
        11 => x.transpose()?.permute(&[1, 0])?.mul(y)?,
        12 => tape.concat(&[y, x, b.reshape(&[1, 3])?.add(x.narrow(0, 0, 1)?)?], 0)?.narrow(0, 1, 2)?,
        13 => {
            let parts = x.split(1, &[1, 2])?;
            tape.concat(&[parts[1], parts[0].mul(y.narrow(1, 0, 1)?)?], 1)?
        }
        14 => x.index_select(0, &[1, 0])?.add(x.index_select(1, &[2, 2, 0])?)?,
        15 => {
            let img = x.reshape(&[1, 1, 2, 3])?;
            let k = w.reshape(&[1, 1, 3, 3])?.scale(0.4);
            let bias = b.narrow(0, 0, 1)?;
            img.conv2d(k, Some(bias))?.reshape(&[2, 3])?
        }
        16 => x.mul(w.logabsdet()?)?.add(y.clamp(-0.8, 0.8))?,
        _ => unreachable!(),
    })
}

#[test]
fn every_primitive_matches_finite_differences() {
    for op in 0..OPS {
        for seed in 0..8 {
            let err = Graph::random(1000 * op as u64 + seed, 2, Some(op)).check();
            assert!(err < 1e-4, "op {op} seed {seed}: relative error {err:e}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn random_graphs_match_finite_differences(seed in any::<u64>(), depth in 1usize..=6) {
        let err = Graph::random(seed, depth, None).check();
        prop_assert!(err < 1e-4, "relative error {err:e}");
    }
}

#[test]
fn matmul_gradient_on_3x4_by_4x2() {
    let mut rng = rng_from_seed(7);
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let r = Tensor::randn(&[3, 2], 1.0, &mut rng);
    let f = |a: &Tensor, b: &Tensor| {
        let tape = Tape::new();
        let out = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
        out.mul(tape.constant(r.clone())).unwrap().sum_all().value().item()
    };
    let tape = Tape::new();
    let (va, vb) = (tape.variable(a.clone()), tape.variable(b.clone()));
    let loss = va.matmul(vb).unwrap().mul(tape.constant(r.clone())).unwrap().sum_all();
    let g = tape.backward(loss).unwrap();
    let fa = finite_difference_grad(|t| f(t, &b), &a, H);
    let fb = finite_difference_grad(|t| f(&a, t), &b, H);
    assert!(max_relative_error(g.wrt(&va).unwrap().data(), fa.data(), 1e-8) < 1e-6);
    assert!(max_relative_error(g.wrt(&vb).unwrap().data(), fb.data(), 1e-8) < 1e-6);
}

#[test]
fn two_layer_relu_net() {
    let mut rng = rng_from_seed(11);
    let x = Tensor::randn(&[5, 4], 1.0, &mut rng);
    let w1 = Tensor::randn(&[4, 8], 0.5, &mut rng);
    let b1 = Tensor::randn(&[8], 0.1, &mut rng);
    let w2 = Tensor::randn(&[8, 3], 0.5, &mut rng);
    let net = |w1: &Tensor| {
        let tape = Tape::new();
        let h = tape.constant(x.clone()).matmul(tape.constant(w1.clone())).unwrap();
        let h = h.add(tape.constant(b1.clone())).unwrap().relu();
        let logits = h.matmul(tape.constant(w2.clone())).unwrap();
        logits.log_softmax(1).unwrap().narrow(1, 0, 1).unwrap().mean_all().value().item()
    };
    let tape = Tape::new();
    let vw1 = tape.variable(w1.clone());
    let h = tape.constant(x.clone()).matmul(vw1).unwrap().add(tape.constant(b1.clone())).unwrap().relu();
    let logits = h.matmul(tape.constant(w2.clone())).unwrap();
    let loss = logits.log_softmax(1).unwrap().narrow(1, 0, 1).unwrap().mean_all();
    let g = tape.backward(loss).unwrap();
    let fd = finite_difference_grad(net, &w1, H);
    assert!(max_relative_error(g.wrt(&vw1).unwrap().data(), fd.data(), FLOOR) < 1e-4);
}

#[test]
fn logabsdet_matches_determinant() {
    let m = Tensor::new(&[2, 2], vec![2.0, 1.0, -3.0, 0.5]).unwrap();
    // det = 1 + 3 = 4
    assert!((logabsdet(2, m.data()).unwrap() - 4f64.ln()).abs() < 1e-14);
    let singular = Tensor::new(&[2, 2], vec![1.0, 2.0, 2.0, 4.0]).unwrap();
    let tape = Tape::new();
    assert!(matches!(tape.constant(singular).logabsdet(), Err(Error::NotInvertible(_))));
}

#[test]
fn forward_values_are_deterministic() {
    let a = Graph::random(99, 6, None);
    let b = Graph::random(99, 6, None);
    let flat = |g: &Graph| Tensor::from_vec(g.leaves.iter().flat_map(|l| l.data().to_vec()).collect());
    assert_eq!(a.value(&flat(&a)).to_bits(), b.value(&flat(&b)).to_bits());
}
