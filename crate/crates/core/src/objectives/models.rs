//! The nuisance classifier and the factorial Gaussian prior on z_n.

use rand::Rng;

use crate::bijective::{Bind, Section};
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tape, Tensor, Var};

fn bind<'t>(tape: &'t Tape, p: &Parameter, mode: Bind) -> Var<'t> {
    match mode {
        Bind::Train => tape.param(p),
        Bind::Frozen => tape.frozen(p),
    }
}

/// ReLU MLP mapping nuisance vectors to class log-probabilities.
#[derive(Clone, Debug)]
pub struct NuisanceClassifier {
    pub dims: Vec<usize>,
    pub weights: Vec<Parameter>,
    pub biases: Vec<Parameter>,
}

impl NuisanceClassifier {
    /// `layers` weight layers: input -> hidden (layers - 1 times) -> classes.
    pub fn new<R: Rng + ?Sized>(input: usize, hidden: usize, layers: usize, classes: usize, rng: &mut R) -> Result<Self> {
        if layers == 0 {
            return Err(Error::Config("nuisance classifier needs at least one layer".into()));
        }
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(hidden, layers - 1));
        dims.push(classes);
        Ok(Self::from_dims(dims, rng))
    }

    fn from_dims<R: Rng + ?Sized>(dims: Vec<usize>, rng: &mut R) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in dims.windows(2) {
            weights.push(Parameter::new(Tensor::randn(&[w[0], w[1]], (2.0 / w[0] as f64).sqrt(), rng)));
            biases.push(Parameter::new(Tensor::zeros(&[w[1]])));
        }
        Self { dims, weights, biases }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn classes(&self) -> usize {
        *self.dims.last().unwrap()
    }

    /// (N, d - C) -> (N, C) log-probabilities.
    pub fn forward<'t>(&self, tape: &'t Tape, zn: Var<'t>, mode: Bind) -> Result<Var<'t>> {
        let s = zn.shape();
        if s.len() != 2 || s[1] != self.input_dim() {
            return Err(Error::shape("nuisance classifier", &s, &[0, self.input_dim()]));
        }
        let last = self.weights.len() - 1;
        let mut h = zn;
        for (i, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            h = h.matmul(bind(tape, w, mode))?.add(bind(tape, b, mode))?;
            if i < last {
                h = h.relu();
            }
        }
        h.log_softmax(1)
    }

    pub fn log_probs(&self, zn: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.forward(&tape, tape.constant(zn.clone()), Bind::Frozen)?.tensor())
    }

    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        self.weights
            .iter()
            .zip(&self.biases)
            .enumerate()
            .flat_map(|(i, (w, b))| [(format!("w{i}"), w), (format!("b{i}"), b)])
            .collect()
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .enumerate()
            .flat_map(|(i, (w, b))| [(format!("w{i}"), w), (format!("b{i}"), b)])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    pub fn to_section(&self, name: &str) -> Section {
        let mut s = Section::new(name, "nuisance-classifier").with_params(self.named_params());
        let dims: Vec<String> = self.dims.iter().map(ToString::to_string).collect();
        s.spec.push(("dims".into(), dims.join("x")));
        s
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        let dims = section
            .spec_value("dims")
            .ok_or_else(|| Error::Config(format!("section {} lacks dims", section.name)))?
            .split('x')
            .map(|d| d.parse().map_err(|_| Error::Config("bad classifier dims".into())))
            .collect::<Result<Vec<usize>>>()?;
        let mut nc = Self::from_dims(dims, &mut crate::rng::rng_from_seed(0));
        section.load_into(nc.named_params_mut())?;
        Ok(nc)
    }
}

/// Smallest prior std; `gamma = softplus(rho) + GAMMA_FLOOR`.
pub const GAMMA_FLOOR: f64 = 1e-6;
const HALF_LOG_2PI: f64 = 0.918_938_533_204_672_7;

/// Independent Gaussians `N(beta_k, gamma_k^2)` over the nuisance dimensions;
/// gamma is the standard deviation.
#[derive(Clone, Debug)]
pub struct GaussianPrior {
    pub beta: Parameter,
    pub rho: Parameter,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Inverse of softplus for y > 0.
fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

impl GaussianPrior {
    /// Standard normal prior.
    pub fn standard(dim: usize) -> Self {
        Self::with_std(Tensor::zeros(&[dim]), &Tensor::ones(&[dim])).expect("positive std")
    }

    pub fn with_std(beta: Tensor, gamma: &Tensor) -> Result<Self> {
        if gamma.data().iter().any(|&g| g <= GAMMA_FLOOR) {
            return Err(Error::domain("gaussian prior", "std must exceed the floor"));
        }
        Ok(Self {
            beta: Parameter::new(beta),
            rho: Parameter::new(gamma.map(|g| softplus_inv(g - GAMMA_FLOOR))),
        })
    }

    pub fn dim(&self) -> usize {
        self.beta.value.numel()
    }

    pub fn gamma(&self) -> Tensor {
        self.rho.value.map(|r| softplus(r) + GAMMA_FLOOR)
    }

    /// Per-sample negative log-density of z_n, (N,).
    pub fn nll<'t>(&self, tape: &'t Tape, zn: Var<'t>, mode: Bind) -> Result<Var<'t>> {
        let s = zn.shape();
        if s.len() != 2 || s[1] != self.dim() {
            return Err(Error::shape("gaussian prior", &s, &[0, self.dim()]));
        }
        let beta = bind(tape, &self.beta, mode);
        let gamma = bind(tape, &self.rho, mode).softplus().add_scalar(GAMMA_FLOOR);
        let quad = zn.sub(beta)?.div(gamma)?.square().scale(0.5);
        let per_dim = quad.add(gamma.log()?)?.add_scalar(HALF_LOG_2PI);
        per_dim.sum(1)
    }

    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        vec![("beta".into(), &self.beta), ("rho".into(), &self.rho)]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        vec![("beta".into(), &mut self.beta), ("rho".into(), &mut self.rho)]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.beta, &mut self.rho]
    }

    pub fn to_section(&self, name: &str) -> Section {
        Section::new(name, "gaussian-prior").with_params(self.named_params())
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        let dim = section
            .params
            .first()
            .map(|(_, t)| t.numel())
            .ok_or_else(|| Error::Config(format!("section {} is empty", section.name)))?;
        let mut p = Self::standard(dim);
        section.load_into(p.named_params_mut())?;
        Ok(p)
    }
}

/// Mean over the batch of `-(sum_k log N(z_nk) + logdet)`.
pub fn mle_nuisance<'t>(zn: Var<'t>, logdet: Var<'t>, prior: &GaussianPrior, mode: Bind) -> Result<Var<'t>> {
    let nll = prior.nll(zn.tape(), zn, mode)?;
    Ok(nll.sub(logdet)?.mean_all())
}
