//! Model construction, training, checkpoints and evaluation shared by the
//! commands, the reproduction recipes and the acceptance harness.

use std::path::Path;
use std::time::Instant;

use invlens_core::attacks::{
    classifier_accuracy, nuisance_codes, train_posthoc_nuisance_probe, BaselineArch, BaselineNet, Classifier,
    ProbeOptions, ProbeReport,
};
use invlens_core::bijective::{Checkpoint, CouplingKind, FullyInvertibleNet, NetSpec, Section, SplitMode};
use invlens_core::datagen::LabeledBatch;
use invlens_core::objectives::{
    accuracy, mi_lower_bound, train, GaussianPrior, IceTrainer, IceWeights, LossReport, NuisanceClassifier, Objective,
    TrainOptions,
};
use invlens_core::rng::{rng_for, Rng};
use invlens_core::tensor::{Adam, SgdMomentum};
use invlens_core::{Optimizer, Tensor};

use crate::config::Config;
use crate::data::Splits;
use crate::error::{CliError, Result};

/// Nuisance classifier and prior learned by an iCE run.
#[derive(Clone, Debug)]
pub struct IceParts {
    pub nc: NuisanceClassifier,
    pub prior: GaussianPrior,
}

#[derive(Clone, Debug)]
pub enum Model {
    Invertible { net: FullyInvertibleNet, ice: Option<IceParts> },
    Baseline(BaselineNet),
}

impl Model {
    pub fn classifier(&self) -> &dyn Classifier {
        match self {
            Model::Invertible { net, .. } => net,
            Model::Baseline(b) => b,
        }
    }

    pub fn net(&self) -> Option<&FullyInvertibleNet> {
        match self {
            Model::Invertible { net, .. } => Some(net),
            Model::Baseline(_) => None,
        }
    }

    pub fn input_shape(&self) -> Vec<usize> {
        match self {
            Model::Invertible { net, .. } => net.input_shape().to_vec(),
            Model::Baseline(b) => match &b.arch {
                BaselineArch::Dense(d) => vec![d[0]],
                BaselineArch::Conv { input, .. } => input.to_vec(),
            },
        }
    }

    pub fn describe(&self) -> &'static str {
        match self {
            Model::Invertible { ice: Some(_), .. } => "fully invertible net (iCE)",
            Model::Invertible { ice: None, .. } => "fully invertible net (CE)",
            Model::Baseline(_) => "non-invertible baseline (CE)",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub reports: Vec<LossReport>,
    pub seconds: f64,
}

fn parse_pair(s: &str, key: &str) -> Result<[usize; 2]> {
    let v: Vec<usize> = s.split('x').filter_map(|p| p.parse().ok()).collect();
    match v[..] {
        [a, b] if a > 0 && b > 0 => Ok([a, b]),
        _ => Err(CliError::Config(format!("invalid value {s:?} for {key}: expected AxB, e.g. 16x32"))),
    }
}

fn image_shape(splits: &Splits) -> Result<[usize; 3]> {
    match splits.sample_shape[..] {
        [c, h, w] => Ok([c, h, w]),
        _ => Err(CliError::Config("conv layout needs image data; use layout = dense".into())),
    }
}

pub fn build_model(cfg: &Config, splits: &Splits) -> Result<Model> {
    let mut rng = rng_for(cfg.seed(), "init");
    let classes = splits.classes;
    let dim: usize = splits.sample_shape.iter().product();
    let (blocks, width) = (cfg.usize("model.blocks"), cfg.usize("model.width"));
    if cfg.str("model.kind") == "baseline" {
        let arch = match cfg.layout() {
            "dense" => {
                let h = cfg.usize("model.baseline_hidden");
                BaselineArch::Dense(vec![dim, h, h, classes])
            }
            _ => BaselineArch::Conv {
                input: image_shape(splits)?,
                filters: parse_pair(cfg.str("model.baseline_filters"), "model.baseline_filters")?,
                classes,
            },
        };
        return Ok(Model::Baseline(BaselineNet::new(arch, &mut rng)?));
    }
    let mut spec = match cfg.layout() {
        "dense" => NetSpec::dense(dim, classes, blocks, width),
        _ => NetSpec::image(image_shape(splits)?, classes, cfg.usize("model.stages"), blocks, width),
    };
    spec.coupling = cfg.str("model.coupling").parse::<CouplingKind>()?;
    spec.split = cfg.str("model.split").parse::<SplitMode>()?;
    let mut net = FullyInvertibleNet::build(&spec, &mut rng)?;
    let n = splits.train.len().min(256);
    let init = splits.prepare(splits.train.take(n).inputs, &mut rng)?;
    net.initialize(&init)?;
    let ice = match cfg.str("objective.kind") {
        "ice" => {
            let d_n = net.split.nuisance_dim();
            let nc = NuisanceClassifier::new(
                d_n,
                cfg.usize("objective.nc_hidden"),
                cfg.usize("objective.nc_layers"),
                classes,
                &mut rng,
            )?;
            Some(IceParts { nc, prior: GaussianPrior::standard(d_n) })
        }
        _ => None,
    };
    Ok(Model::Invertible { net, ice })
}

pub fn optimizer(cfg: &Config) -> Optimizer {
    let (lr, wd) = (cfg.f64("optim.lr"), cfg.f64("optim.weight_decay"));
    match cfg.str("optim.kind") {
        "sgd" => Optimizer::Sgd(SgdMomentum::new(lr, 0.9).with_weight_decay(wd)),
        _ => Optimizer::Adam(Adam::new(lr).with_weight_decay(wd)),
    }
}

/// Builds and trains the configured model. `on_step` sees every report.
pub fn train_model(
    cfg: &Config,
    splits: &Splits,
    mut on_step: impl FnMut(usize, &LossReport) -> Result<()>,
) -> Result<TrainOutcome> {
    let start = Instant::now();
    let model = build_model(cfg, splits)?;
    let mut opt = optimizer(cfg);
    let mut rng = rng_for(cfg.seed(), "train");
    let opts = TrainOptions {
        epochs: cfg.usize("optim.epochs"),
        batch_size: cfg.usize("optim.batch_size").max(1),
        lr_decay: cfg.f64("optim.lr_decay"),
    };
    let mut reports = Vec::new();
    let mut hook_err = None;
    let mut hook = |step: usize, r: &LossReport| {
        reports.push(*r);
        if let Err(e) = on_step(step, r) {
            hook_err = Some(e);
            return Err(invlens_core::Error::Unsupported("training interrupted".into()));
        }
        Ok(())
    };
    let prepare = |x: Tensor, rng: &mut Rng| splits.prepare(x, rng);
    let (x, y) = (&splits.train.inputs, &splits.train.labels);
    let result = match model {
        Model::Baseline(mut b) => b
            .fit(&mut opt, x, y, opts, &mut rng, prepare, &mut hook)
            .map(|()| Model::Baseline(b)),
        Model::Invertible { mut net, ice } => {
            let mut objective = match ice {
                None => Objective::CrossEntropy,
                Some(parts) => {
                    let weights = IceWeights {
                        lambda_n: cfg.f64("objective.lambda_n"),
                        lambda_m: cfg.f64("objective.lambda_m"),
                        k_nc: cfg.usize("objective.k_nc"),
                    };
                    let nc_opt = Optimizer::Adam(Adam::new(cfg.f64("objective.nc_lr")));
                    let t = IceTrainer::new(parts.nc, parts.prior, nc_opt, weights)?;
                    Objective::Ice(Box::new(t.with_warmup(cfg.usize("objective.warmup_steps"))))
                }
            };
            train(&mut net, &mut objective, &mut opt, x, y, opts, &mut rng, prepare, &mut hook).map(|()| {
                let ice = match objective {
                    Objective::Ice(t) => Some(IceParts { nc: t.nc, prior: t.prior }),
                    Objective::CrossEntropy => None,
                };
                Model::Invertible { net, ice }
            })
        }
    };
    if let Some(e) = hook_err {
        return Err(e);
    }
    Ok(TrainOutcome {
        model: result?,
        reports,
        seconds: start.elapsed().as_secs_f64(),
    })
}

const RUN_SECTION: &str = "run";

pub fn save_checkpoint(path: &Path, cfg: &Config, model: &Model) -> Result<()> {
    let mut run = Section::new(RUN_SECTION, "run-info");
    run.spec.push(("dataset".into(), cfg.str("experiment.dataset").into()));
    run.spec.push(("name".into(), cfg.str("experiment.name").into()));
    let mut sections = vec![run];
    match model {
        Model::Invertible { net, ice } => {
            sections.push(net.to_section("net"));
            if let Some(p) = ice {
                sections.push(p.nc.to_section("nc"));
                sections.push(p.prior.to_section("prior"));
            }
        }
        Model::Baseline(b) => sections.push(b.to_section("baseline")),
    }
    Checkpoint { sections }.save(path)?;
    Ok(())
}

/// Loads a model and the dataset name it was trained on.
pub fn load_checkpoint(path: &Path) -> Result<(Model, String)> {
    let ck = Checkpoint::load(path).map_err(|e| CliError::Runtime(format!("cannot load checkpoint: {e}")))?;
    let dataset = ck
        .section(RUN_SECTION)
        .and_then(|s| s.spec_value("dataset"))
        .unwrap_or("unknown")
        .to_string();
    let model = if let Some(s) = ck.section("net") {
        let net = FullyInvertibleNet::from_section(s)?;
        let ice = match (ck.section("nc"), ck.section("prior")) {
            (Some(nc), Some(prior)) => Some(IceParts {
                nc: NuisanceClassifier::from_section(nc)?,
                prior: GaussianPrior::from_section(prior)?,
            }),
            _ => None,
        };
        Model::Invertible { net, ice }
    } else if let Some(s) = ck.section("baseline") {
        Model::Baseline(BaselineNet::from_section(s)?)
    } else {
        return Err(CliError::Runtime(format!("{} holds no model section", path.display())));
    };
    Ok((model, dataset))
}

pub fn check_compatible(model: &Model, splits: &Splits) -> Result<()> {
    let shape = model.input_shape();
    if shape != splits.sample_shape {
        return Err(CliError::Runtime(format!(
            "checkpoint expects inputs of shape {shape:?} but the dataset provides {:?}",
            splits.sample_shape
        )));
    }
    Ok(())
}

/// One line of an evaluation table.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    /// `logit`, `probe` (post-hoc nuisance probe) or `nc` (the iCE run's own
    /// nuisance classifier).
    pub readout: &'static str,
    pub split: &'static str,
    pub n: usize,
    pub error: f64,
    /// NaN for the logit readout.
    pub mi_lower_bound: f64,
}

pub fn probe_options(cfg: &Config) -> ProbeOptions {
    ProbeOptions {
        hidden: cfg.usize("probe.hidden"),
        layers: cfg.usize("probe.layers"),
        epochs: cfg.usize("probe.epochs"),
        batch_size: cfg.usize("probe.batch_size").max(1),
        lr: cfg.f64("probe.lr"),
    }
}

fn nuisance_rows(
    readout: &'static str,
    nc: &NuisanceClassifier,
    net: &FullyInvertibleNet,
    splits: &[(&'static str, &LabeledBatch)],
) -> Result<Vec<EvalRow>> {
    splits
        .iter()
        .map(|(name, b)| {
            let lp = nc.log_probs(&nuisance_codes(net, &b.inputs, 256)?)?;
            Ok(EvalRow {
                readout,
                split: name,
                n: b.len(),
                error: 1.0 - accuracy(&lp, &b.labels),
                mi_lower_bound: mi_lower_bound(&lp, &b.labels)?.value,
            })
        })
        .collect()
}

/// Logit error on every split, plus nuisance readouts for invertible nets.
/// Returns the rows and the trained post-hoc probe, if any.
pub fn evaluate(cfg: &Config, model: &Model, splits: &Splits, probe: bool) -> Result<(Vec<EvalRow>, Option<ProbeReport>)> {
    check_compatible(model, splits)?;
    let named = splits.named();
    let mut rows = Vec::new();
    for (name, b) in &named {
        let acc = classifier_accuracy(model.classifier(), &b.inputs, &b.labels, 256)?;
        rows.push(EvalRow { readout: "logit", split: name, n: b.len(), error: 1.0 - acc, mi_lower_bound: f64::NAN });
    }
    let mut report = None;
    if let Model::Invertible { net, ice } = model {
        if probe {
            let mut rng = rng_for(cfg.seed(), "probe");
            let r = train_posthoc_nuisance_probe(net, &splits.train, &splits.test_clean, probe_options(cfg), &mut rng)?;
            rows.extend(nuisance_rows("probe", &r.probe, net, &named)?);
            report = Some(r);
        }
        if let Some(p) = ice {
            rows.extend(nuisance_rows("nc", &p.nc, net, &named)?);
        }
    }
    Ok((rows, report))
}

pub fn find_row<'a>(rows: &'a [EvalRow], readout: &str, split: &str) -> Option<&'a EvalRow> {
    rows.iter().find(|r| r.readout == readout && r.split == split)
}
