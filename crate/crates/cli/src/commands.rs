//! The train, eval, attack and slice commands.

use std::fmt::Write as _;

use invlens_core::attacks::{
    interpolate_nuisance, metamer_exact, metamer_gradient, norm_sphere_classifier, scan_decision_slice,
    train_posthoc_nuisance_probe, BaselineArch, BaselineNet, Classifier, FnClassifier, GradientMetamerOptions,
    LogitModel, MetamerResult, NuisanceView, SliceScan,
};
use invlens_core::datagen::{write_pgm_grid, LabeledBatch};
use invlens_core::objectives::TrainOptions;
use invlens_core::rng::{rng_for, Rng};
use invlens_core::tensor::Adam;
use invlens_core::{Optimizer, Tensor};
use rand::Rng as _;

use crate::config::Config;
use crate::data::{load_splits, Splits};
use crate::error::{CliError, Result};
use crate::output::{num, MetricsWriter, OutputDir};
use crate::run::{
    evaluate, load_checkpoint, probe_options, save_checkpoint, train_model, EvalRow, Model, TrainOutcome,
};

pub struct TrainResult {
    pub outcome: TrainOutcome,
    pub splits: Splits,
    pub rows: Vec<EvalRow>,
}

/// Trains, writes checkpoint, metrics, a logit-error summary and manifest.
pub fn cmd_train(cfg: &Config) -> Result<TrainResult> {
    let splits = load_splits(cfg)?;
    let mut out = OutputDir::open(&cfg.out_dir())?;
    let mut metrics = MetricsWriter::create(&out.file("metrics.csv"), cfg.usize("log.every"))?;
    let outcome = train_model(cfg, &splits, |step, r| metrics.row(step, r))?;
    metrics.close()?;
    save_checkpoint(&out.file("checkpoint.fire"), cfg, &outcome.model)?;
    let (rows, _) = evaluate(cfg, &outcome.model, &splits, false)?;
    out.write("summary.csv", &eval_csv(&rows))?;
    out.finish("train", cfg)?;
    Ok(TrainResult { outcome, splits, rows })
}

pub fn eval_csv(rows: &[EvalRow]) -> String {
    let mut s = String::from("readout,split,n,error,mi_lower_bound\n");
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.readout, r.split, r.n, num(r.error), num(r.mi_lower_bound));
    }
    s
}

fn load_model(cfg: &Config) -> Result<Model> {
    let path = cfg.checkpoint_path();
    let (model, dataset) = load_checkpoint(&path)?;
    let want = cfg.str("experiment.dataset");
    if dataset != want && dataset != "unknown" {
        eprintln!("note: checkpoint was trained on {dataset}, evaluating on {want}");
    }
    Ok(model)
}

/// Logit and nuisance-probe errors on every split.
pub fn cmd_eval(cfg: &Config) -> Result<Vec<EvalRow>> {
    let model = load_model(cfg)?;
    let splits = load_splits(cfg)?;
    let mut out = OutputDir::open(&cfg.out_dir())?;
    let (rows, _) = evaluate(cfg, &model, &splits, true)?;
    out.write("eval.csv", &eval_csv(&rows))?;
    out.finish("eval", cfg)?;
    Ok(rows)
}

/// Random (semantic, nuisance) index pairs with different labels.
pub fn sample_pairs(batch: &LabeledBatch, pairs: usize, rng: &mut Rng) -> Result<Vec<(usize, usize)>> {
    let n = batch.len();
    let mut out = Vec::with_capacity(pairs);
    let mut tries = 0;
    while out.len() < pairs {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        tries += 1;
        if batch.labels[a] != batch.labels[b] || tries > 100 * pairs {
            out.push((a, b));
        }
        if tries > 1000 * pairs.max(1) {
            return Err(CliError::Runtime("could not sample attack pairs".into()));
        }
    }
    Ok(out)
}

fn image_hw(splits: &Splits) -> Option<(usize, usize)> {
    match splits.image {
        Some([1, h, w]) => Some((h, w)),
        _ => None,
    }
}

fn residual_csv(pairs: &[(usize, usize)], batch: &LabeledBatch, res: &MetamerResult, model: &dyn Classifier) -> Result<String> {
    let sem_class = res.target_logits.argmax_rows();
    let met_class = model.predict(&res.metamer)?;
    let mut s = String::from(
        "pair,semantic_index,nuisance_index,semantic_label,nuisance_label,semantic_class,metamer_class,semantic_residual,mse\n",
    );
    for (i, &(a, b)) in pairs.iter().enumerate() {
        let t = res.target_logits.row(i);
        let g = res.achieved_logits.row(i);
        let resid = t.iter().zip(g).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        let mse = t.iter().zip(g).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / t.len() as f64;
        let _ = writeln!(
            s,
            "{i},{a},{b},{},{},{},{},{},{}",
            batch.labels[a], batch.labels[b], sem_class[i], met_class[i], num(resid), num(mse)
        );
    }
    Ok(s)
}

/// A dense classifier trained on the raw training data, used to label
/// interpolants independently of the attacked net.
pub fn train_label_probe(cfg: &Config, splits: &Splits) -> Result<BaselineNet> {
    let mut rng = rng_for(cfg.seed(), "label-probe");
    let dim: usize = splits.sample_shape.iter().product();
    let h = cfg.usize("probe.hidden");
    let mut probe = BaselineNet::new(BaselineArch::Dense(vec![dim, h, h, splits.classes]), &mut rng)?;
    let x = splits.train.inputs.reshape(&[splits.train.len(), dim])?;
    let opts = TrainOptions { epochs: cfg.usize("probe.epochs"), batch_size: cfg.usize("probe.batch_size").max(1), lr_decay: 1.0 };
    let mut opt = Optimizer::Adam(Adam::new(cfg.f64("probe.lr")));
    probe.fit(&mut opt, &x, &splits.train.labels, opts, &mut rng, |x, _| Ok(x), |_, _| Ok(()))?;
    Ok(probe)
}

pub struct AttackResult {
    pub pairs: Vec<(usize, usize)>,
    pub metamers: Option<MetamerResult>,
    /// Per pair: (semantic label, nuisance label, probe label at t = 1).
    pub interpolation_labels: Vec<(usize, usize, usize)>,
}

fn require_net<'m>(model: &'m Model, what: &str) -> Result<&'m invlens_core::bijective::FullyInvertibleNet> {
    model.net().ok_or_else(|| {
        CliError::Config(format!(
            "the {what} attack inverts the network, but this checkpoint holds a {}; \
             use attack.kind = gradient for non-invertible models",
            model.describe()
        ))
    })
}

pub fn cmd_attack(cfg: &Config) -> Result<AttackResult> {
    let model = load_model(cfg)?;
    let splits = load_splits(cfg)?;
    crate::run::check_compatible(&model, &splits)?;
    let mut out = OutputDir::open(&cfg.out_dir())?;
    let mut rng = rng_for(cfg.seed(), "attack/pairs");
    let test = &splits.test_clean;
    let pairs = sample_pairs(test, cfg.usize("attack.pairs").max(1), &mut rng)?;
    let sem = test.inputs.select_rows(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
    let nui = test.inputs.select_rows(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
    let kind = cfg.str("attack.kind");
    let mut result = AttackResult { pairs: pairs.clone(), metamers: None, interpolation_labels: Vec::new() };
    match kind {
        "exact" | "gradient" => {
            let res = if kind == "exact" {
                metamer_exact(require_net(&model, "exact")?, &sem, &nui)?
            } else {
                let opts = GradientMetamerOptions { iterations: cfg.usize("attack.iterations"), lr: cfg.f64("attack.lr") };
                let lm: &dyn LogitModel = match &model {
                    Model::Invertible { net, .. } => net,
                    Model::Baseline(b) => b,
                };
                metamer_gradient(lm, &sem, &nui, opts)?
            };
            out.write("residuals.csv", &residual_csv(&pairs, test, &res, model.classifier())?)?;
            if let Some((h, w)) = image_hw(&splits) {
                let rows = [&sem, &res.metamer, &nui];
                let tiles: Vec<&[f64]> = rows.iter().flat_map(|t| (0..t.batch()).map(|i| t.row(i))).collect();
                write_pgm_grid(&out.file("metamers.pgm"), &tiles, h, w, pairs.len())?;
            }
            result.metamers = Some(res);
        }
        _ => {
            let net = require_net(&model, "interpolation")?;
            let frames = interpolate_nuisance(net, &sem, &nui, cfg.usize("attack.steps"))?;
            let probe = if cfg.bool("attack.probe") { Some(train_label_probe(cfg, &splits)?) } else { None };
            let base = net.logits(&sem)?;
            let mut csv = String::from("pair,step,t,semantic_label,target_label,logit_residual,probe_label\n");
            let steps = frames.len();
            for (s, f) in frames.iter().enumerate() {
                let lg = net.logits(f)?;
                let labels = match &probe {
                    Some(p) => Some(p.predict(&f.reshape(&[f.batch(), f.row_len()])?)?),
                    None => None,
                };
                for (i, &(a, b)) in pairs.iter().enumerate() {
                    let r = lg.row(i).iter().zip(base.row(i)).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
                    let pl = labels.as_ref().map_or("".to_string(), |l| l[i].to_string());
                    let _ = writeln!(
                        csv,
                        "{i},{s},{},{},{},{},{pl}",
                        s as f64 / (steps - 1) as f64,
                        test.labels[a],
                        test.labels[b],
                        num(r)
                    );
                    if s + 1 == steps {
                        if let Some(l) = &labels {
                            result.interpolation_labels.push((test.labels[a], test.labels[b], l[i]));
                        }
                    }
                }
            }
            out.write("interpolation.csv", &csv)?;
            if let Some((h, w)) = image_hw(&splits) {
                // one column per pair, one row per step
                let tiles: Vec<&[f64]> = frames.iter().flat_map(|t| (0..t.batch()).map(move |i| t.row(i))).collect();
                write_pgm_grid(&out.file("interpolation.pgm"), &tiles, h, w, pairs.len())?;
            }
        }
    }
    out.finish("attack", cfg)?;
    Ok(result)
}

/// Fraction of grid points beyond the mid radius that a scan labels inner.
pub fn corridor_fraction(scan: &SliceScan, r1: f64, r2: f64) -> f64 {
    let mid = 0.5 * (r1 + r2);
    scan.fraction(|p, class| class == 0 && p.iter().map(|v| v * v).sum::<f64>().sqrt() > mid)
}

#[derive(Clone, Debug)]
pub struct SliceRow {
    pub plane: &'static str,
    pub readout: &'static str,
    pub corridor: f64,
    pub inner: f64,
}

/// Decision maps of the logit classifier, a post-hoc nuisance probe and the
/// analytic norm rule on two planes through the origin: one spanned by an
/// inner and an outer test point, one by the inner point and its metamer
/// with the outer point's nuisance.
pub fn cmd_slice(cfg: &Config) -> Result<Vec<SliceRow>> {
    if cfg.str("experiment.dataset") != "spheres" {
        return Err(CliError::Config("slice scans are defined for the spheres dataset".into()));
    }
    let model = load_model(cfg)?;
    let splits = load_splits(cfg)?;
    crate::run::check_compatible(&model, &splits)?;
    let net = require_net(&model, "slice")?;
    let spec = splits.spheres.expect("spheres dataset");
    let mut out = OutputDir::open(&cfg.out_dir())?;
    let test = &splits.test_clean;
    let inner = test.labels.iter().position(|&l| l == 0).expect("balanced test set");
    let outer = test.labels.iter().position(|&l| l == 1).expect("balanced test set");
    let x = test.inputs.select_rows(&[inner]);
    let x_out = test.inputs.select_rows(&[outer]);
    let metamer = metamer_exact(net, &x, &x_out)?.metamer;
    let origin = Tensor::zeros(x.shape());
    let mut rng = rng_for(cfg.seed(), "probe");
    let probe = train_posthoc_nuisance_probe(net, &splits.train, test, probe_options(cfg), &mut rng)?;
    let nuisance = NuisanceView { net, nc: &probe.probe };
    let (r1, r2) = (spec.r1, spec.r2);
    let norm = FnClassifier(move |p: &[f64]| norm_sphere_classifier(p, r1, r2));
    let readouts: [(&'static str, &dyn Classifier); 3] = [("logit", net), ("nuisance", &nuisance), ("norm", &norm)];
    let grid = cfg.usize("slice.grid");
    let mut rows = Vec::new();
    let mut summary = String::from("plane,readout,grid,corridor_fraction,inner_fraction\n");
    for (plane, p2) in [("random", &x_out), ("metamer", &metamer)] {
        for (readout, c) in readouts {
            let scan = scan_decision_slice(c, &origin, &x, p2, grid)?;
            scan.write_csv(&out.file(&format!("slice_{plane}_{readout}.csv")))?;
            scan.write_pgm(&out.file(&format!("slice_{plane}_{readout}.pgm")), 2)?;
            let row = SliceRow {
                plane,
                readout,
                corridor: corridor_fraction(&scan, r1, r2),
                inner: scan.fraction(|_, c| c == 0),
            };
            let _ = writeln!(summary, "{plane},{readout},{grid},{},{}", row.corridor, row.inner);
            rows.push(row);
        }
    }
    out.write("slice_summary.csv", &summary)?;
    out.finish("slice", cfg)?;
    Ok(rows)
}
