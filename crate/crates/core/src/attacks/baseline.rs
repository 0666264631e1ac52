//! A small non-invertible classifier used as the comparison model.

use rand::Rng;

use super::model::LogitModel;
use crate::bijective::Section;
use crate::error::{Error, Result};
use crate::objectives::{accuracy, minibatches, semantic_cross_entropy, LossReport, TrainOptions};
use crate::tensor::{Optimizer, Parameter, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq)]
pub enum BaselineArch {
    /// ReLU MLP over vectors with the given layer sizes.
    Dense(Vec<usize>),
    /// conv3x3 -> relu -> avgpool2 -> conv3x3 -> relu -> avgpool2 -> dense,
    /// on (c, h, w) inputs with h and w divisible by 4.
    Conv { input: [usize; 3], filters: [usize; 2], classes: usize },
}

#[derive(Clone, Debug)]
pub struct BaselineNet {
    pub arch: BaselineArch,
    pub params: Vec<Parameter>,
}

fn he<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Parameter {
    Parameter::new(Tensor::randn(shape, (2.0 / fan_in as f64).sqrt(), rng))
}

fn avgpool2<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    let (n, c, h, w) = (s[0], s[1], s[2] / 2, s[3] / 2);
    x.reshape(&[n, c, h, 2, w, 2])?
        .permute(&[0, 1, 2, 4, 3, 5])?
        .reshape(&[n, c, h, w, 4])?
        .mean(4)
}

impl BaselineNet {
    pub fn new<R: Rng + ?Sized>(arch: BaselineArch, rng: &mut R) -> Result<Self> {
        let mut params = Vec::new();
        match &arch {
            BaselineArch::Dense(dims) => {
                if dims.len() < 2 {
                    return Err(Error::Config("dense baseline needs at least input and output sizes".into()));
                }
                for w in dims.windows(2) {
                    params.push(he(&[w[0], w[1]], w[0], rng));
                    params.push(Parameter::new(Tensor::zeros(&[w[1]])));
                }
            }
            BaselineArch::Conv { input, filters, classes } => {
                let [c, h, w] = *input;
                if h % 4 != 0 || w % 4 != 0 {
                    return Err(Error::Config(format!("conv baseline needs spatial sizes divisible by 4, got {h}x{w}")));
                }
                params.push(he(&[filters[0], c, 3, 3], c * 9, rng));
                params.push(Parameter::new(Tensor::zeros(&[filters[0]])));
                params.push(he(&[filters[1], filters[0], 3, 3], filters[0] * 9, rng));
                params.push(Parameter::new(Tensor::zeros(&[filters[1]])));
                let flat = filters[1] * (h / 4) * (w / 4);
                params.push(he(&[flat, *classes], flat, rng));
                params.push(Parameter::new(Tensor::zeros(&[*classes])));
            }
        }
        Ok(Self { arch, params })
    }

    pub fn classes(&self) -> usize {
        match &self.arch {
            BaselineArch::Dense(d) => *d.last().unwrap(),
            BaselineArch::Conv { classes, .. } => *classes,
        }
    }

    fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, train: bool) -> Result<Var<'t>> {
        let p = |i: usize| if train { tape.param(&self.params[i]) } else { tape.frozen(&self.params[i]) };
        match &self.arch {
            BaselineArch::Dense(dims) => {
                let layers = dims.len() - 1;
                let mut h = x.flatten()?;
                for l in 0..layers {
                    h = h.matmul(p(2 * l))?.add(p(2 * l + 1))?;
                    if l + 1 < layers {
                        h = h.relu();
                    }
                }
                Ok(h)
            }
            BaselineArch::Conv { .. } => {
                let h = avgpool2(x.conv2d(p(0), Some(p(1)))?.relu())?;
                let h = avgpool2(h.conv2d(p(2), Some(p(3)))?.relu())?;
                h.flatten()?.matmul(p(4))?.add(p(5))
            }
        }
    }

    /// Minibatch cross-entropy training with the same hooks as the
    /// invertible-net trainer.
    #[allow(clippy::too_many_arguments)]
    pub fn fit<R: Rng + ?Sized>(
        &mut self,
        opt: &mut Optimizer,
        x: &Tensor,
        y: &[usize],
        opts: TrainOptions,
        rng: &mut R,
        mut prepare: impl FnMut(Tensor, &mut R) -> Result<Tensor>,
        mut on_step: impl FnMut(usize, &LossReport) -> Result<()>,
    ) -> Result<()> {
        if x.batch() != y.len() {
            return Err(Error::shape("fit", &[x.batch()], &[y.len()]));
        }
        let mut step = 0;
        for _ in 0..opts.epochs {
            for idx in minibatches(y.len(), opts.batch_size, rng) {
                let xb = prepare(x.select_rows(&idx), rng)?;
                let yb: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
                let tape = Tape::new();
                let logits = self.forward(&tape, tape.constant(xb), true)?;
                let acc = accuracy(&logits.value(), &yb);
                let loss = semantic_cross_entropy(logits, &yb)?;
                let sce = loss.value().item();
                let grads = tape.backward(loss)?;
                grads.store(self.params.iter_mut().collect());
                opt.step(&mut self.params.iter_mut().collect::<Vec<_>>())?;
                on_step(step, &LossReport::cross_entropy(sce, acc))?;
                step += 1;
            }
            let lr = opt.lr() * opts.lr_decay;
            opt.set_lr(lr);
        }
        Ok(())
    }

    pub fn to_section(&self, name: &str) -> Section {
        let mut s = Section::new(name, "baseline-net")
            .with_params(self.params.iter().enumerate().map(|(i, p)| (format!("p{i}"), p)));
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join("x");
        match &self.arch {
            BaselineArch::Dense(d) => s.spec.push(("dense".into(), join(d))),
            BaselineArch::Conv { input, filters, classes } => {
                s.spec.push(("conv_input".into(), join(input)));
                s.spec.push(("conv_filters".into(), join(filters)));
                s.spec.push(("classes".into(), classes.to_string()));
            }
        }
        s
    }

    pub fn from_section(section: &Section) -> Result<Self> {
        let bad = || Error::Config(format!("section {} is not a valid baseline", section.name));
        let dims = |k: &str| -> Result<Vec<usize>> {
            section
                .spec_value(k)
                .ok_or_else(bad)?
                .split('x')
                .map(|v| v.parse().map_err(|_| bad()))
                .collect()
        };
        let arch = if section.spec_value("dense").is_some() {
            BaselineArch::Dense(dims("dense")?)
        } else {
            let i = dims("conv_input")?;
            let f = dims("conv_filters")?;
            if i.len() != 3 || f.len() != 2 {
                return Err(bad());
            }
            let classes = section.spec_value("classes").ok_or_else(bad)?.parse().map_err(|_| bad())?;
            BaselineArch::Conv {
                input: [i[0], i[1], i[2]],
                filters: [f[0], f[1]],
                classes,
            }
        };
        let mut net = Self::new(arch, &mut crate::rng::rng_from_seed(0))?;
        let targets = net.params.iter_mut().enumerate().map(|(i, p)| (format!("p{i}"), p)).collect();
        section.load_into(targets)?;
        Ok(net)
    }
}

impl LogitModel for BaselineNet {
    fn logits_var<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        self.forward(tape, x, false)
    }
}
