//! End-to-end reproduction pipelines built from the bundled recipes.

use std::fmt::Write as _;
use std::path::PathBuf;

use invlens_core::attacks::{adversarial_last_coordinate, classifier_accuracy, misaligned_sphere_classifier, FnClassifier};

use crate::commands::{cmd_attack, cmd_eval, cmd_slice, cmd_train, TrainResult};
use crate::config::Config;
use crate::error::{CliError, Result};
use crate::output::OutputDir;
use crate::run::{find_row, EvalRow};

pub const RECIPES: &[(&str, &str)] = &[
    ("spheres-ce", include_str!("../recipes/spheres-ce.conf")),
    ("spheres-ice", include_str!("../recipes/spheres-ice.conf")),
    ("mnist-ce", include_str!("../recipes/mnist-ce.conf")),
    ("mnist-ice", include_str!("../recipes/mnist-ice.conf")),
    ("binary-baseline", include_str!("../recipes/binary-baseline.conf")),
    ("binary-ce", include_str!("../recipes/binary-ce.conf")),
    ("binary-ice", include_str!("../recipes/binary-ice.conf")),
    ("texture-baseline", include_str!("../recipes/texture-baseline.conf")),
    ("texture-ce", include_str!("../recipes/texture-ce.conf")),
    ("texture-ice", include_str!("../recipes/texture-ice.conf")),
];

pub const IDS: &[&str] = &[
    "spheres-fig3",
    "mnist-fig5",
    "mnist-fig6",
    "shiftmnist-binary",
    "shiftmnist-texture",
    "mnist-table2",
];

/// Keys a user overlay may not change because they define the recipe.
const FIXED: &[&str] = &[
    "experiment.name",
    "experiment.dataset",
    "experiment.out",
    "experiment.checkpoint",
    "model.kind",
    "objective.kind",
    "attack.kind",
];

pub fn recipe(name: &str) -> Result<Config> {
    let text = RECIPES
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, t)| *t)
        .ok_or_else(|| CliError::Config(format!("unknown recipe {name}")))?;
    Config::parse(text)
}

/// Full-scale settings for a dataset family; no acceptance guarantees.
pub fn apply_full_profile(cfg: &mut Config) -> Result<()> {
    let sets: &[(&str, &str)] = match cfg.str("experiment.dataset") {
        "spheres" => &[("spheres.n_train", "500000"), ("spheres.n_test", "100000"), ("objective.nc_hidden", "1000")],
        "mnist" => &[
            ("mnist.n_train", "0"),
            ("mnist.n_test", "0"),
            ("mnist.augment_shift", "3"),
            ("model.blocks", "16"),
            ("model.width", "128"),
            ("optim.epochs", "100"),
            // 0.2 every 30 epochs, spread evenly over epochs
            ("optim.lr_decay", "0.94780"),
            ("optim.weight_decay", "0.0001"),
            ("objective.nc_hidden", "512"),
        ],
        _ => &[("mnist.n_train", "0"), ("mnist.n_test", "0"), ("optim.lr", "0.0001"), ("objective.nc_hidden", "1000")],
    };
    for (k, v) in sets {
        cfg.set(k, v)?;
    }
    Ok(())
}

/// Settings shared by every run of one reproduction.
#[derive(Clone, Debug)]
pub struct Reproduction {
    pub root: PathBuf,
    pub overlay: Option<Config>,
    pub full: bool,
}

impl Reproduction {
    /// The recipe, with the overlay applied and outputs under `root/sub`.
    pub fn config(&self, recipe_name: &str, sub: &str) -> Result<Config> {
        let mut cfg = recipe(recipe_name)?;
        if let Some(o) = &self.overlay {
            cfg.overlay(o, FIXED);
        }
        if self.full {
            apply_full_profile(&mut cfg)?;
        }
        cfg.set("experiment.out", &self.root.join(sub).to_string_lossy())?;
        Ok(cfg)
    }

    /// A follow-up command's config reading `train_sub`'s checkpoint.
    pub fn follow_up(&self, recipe_name: &str, train_sub: &str, sub: &str) -> Result<Config> {
        let mut cfg = self.config(recipe_name, sub)?;
        let ck = self.root.join(train_sub).join("checkpoint.fire");
        cfg.set("experiment.checkpoint", &ck.to_string_lossy())?;
        Ok(cfg)
    }

    pub fn train(&self, recipe_name: &str) -> Result<TrainResult> {
        eprintln!("training {recipe_name}");
        cmd_train(&self.config(recipe_name, recipe_name)?)
    }
}

fn pct(v: f64) -> String {
    format!("{:6.2}", 100.0 * v)
}

fn err(rows: &[EvalRow], readout: &str, split: &str) -> f64 {
    find_row(rows, readout, split).map_or(f64::NAN, |r| r.error)
}

fn spheres_fig3(r: &Reproduction, report: &mut String) -> Result<()> {
    let ce = r.train("spheres-ce")?;
    let ice = r.train("spheres-ice")?;
    let ce_eval = cmd_eval(&r.follow_up("spheres-ce", "spheres-ce", "spheres-ce-eval")?)?;
    let ice_eval = cmd_eval(&r.follow_up("spheres-ice", "spheres-ice", "spheres-ice-eval")?)?;
    let slices = cmd_slice(&r.follow_up("spheres-ce", "spheres-ce", "spheres-ce-slice")?)?;
    let spec = ce.splits.spheres.expect("spheres run");
    let (r1, r2) = (spec.r1, spec.r2);
    let eq8 = FnClassifier(move |x: &[f64]| misaligned_sphere_classifier(x, r1, r2));
    let honest = classifier_accuracy(&eq8, &ce.splits.test_clean.inputs, &ce.splits.test_clean.labels, 1024)?;
    let adv = adversarial_last_coordinate(&ce.splits.test_clean, &spec)?;
    let adv_acc = classifier_accuracy(&eq8, &adv.batch.inputs, &adv.batch.labels, 1024)?;
    let _ = writeln!(report, "concentric spheres d={} r1={} r2={}\n", spec.d, r1, r2);
    let _ = writeln!(report, "run          train acc %  test acc %   reference");
    for (name, rows) in [("ce", &ce.rows), ("ice", &ice.rows)] {
        let _ = writeln!(
            report,
            "{name:<12} {}       {}       100.00 / 100.00",
            pct(1.0 - err(rows, "logit", "train")),
            pct(1.0 - err(rows, "logit", "test_clean"))
        );
    }
    let _ = writeln!(report, "\nnuisance readouts (test):");
    for (name, rows) in [("ce probe", &ce_eval), ("ice probe", &ice_eval)] {
        let t = find_row(rows, "probe", "test_clean");
        let _ = writeln!(
            report,
            "{name:<12} error {}%  MI bound {:.4} nats",
            pct(t.map_or(f64::NAN, |r| r.error)),
            t.map_or(f64::NAN, |r| r.mi_lower_bound)
        );
    }
    if let Some(t) = find_row(&ice_eval, "nc", "train") {
        let _ = writeln!(report, "ice own NC   error {}%  MI bound {:.4} nats (train)", pct(t.error), t.mi_lower_bound);
    }
    let _ = writeln!(report, "\nslice planes (ce model): fraction of grid beyond mid radius labeled inner");
    for s in &slices {
        let _ = writeln!(report, "{:<8} {:<9} {:.4}", s.plane, s.readout, s.corridor);
    }
    let _ = writeln!(
        report,
        "\nmisaligned classifier: honest {}%  x_d-adjusted {}% (reference: perfect vs chance)",
        pct(honest),
        pct(adv_acc)
    );
    let _ = writeln!(report, "  {} points flipped, {} outer points skipped (their first d-1 coordinates exceed r1)", adv.flipped, adv.skipped);
    let _ = writeln!(report, "\ntraining time: ce {:.1}s, ice {:.1}s", ce.outcome.seconds, ice.outcome.seconds);
    Ok(())
}

fn mnist_fig5(r: &Reproduction, report: &mut String) -> Result<()> {
    let ce = r.train("mnist-ce")?;
    let exact = cmd_attack(&r.follow_up("mnist-ce", "mnist-ce", "mnist-ce-exact")?)?;
    let mut g = r.follow_up("mnist-ce", "mnist-ce", "mnist-ce-gradient")?;
    g.set("attack.kind", "gradient")?;
    let grad = cmd_attack(&g)?;
    let _ = writeln!(report, "mnist ce test error {}%\n", pct(err(&ce.rows, "logit", "test_clean")));
    for (name, res) in [("exact", &exact), ("gradient", &grad)] {
        let m = res.metamers.as_ref().expect("metamer attack");
        let _ = writeln!(
            report,
            "{name:<9} pairs {}  max logit residual {:.3e}  logit mse {:.3e}  decision agreement {}%",
            res.pairs.len(),
            m.semantic_residual,
            m.mse,
            pct(m.decision_agreement())
        );
    }
    let _ = writeln!(report, "\ngrids: rows are semantic source, metamer, nuisance source");
    Ok(())
}

fn mnist_fig6(r: &Reproduction, report: &mut String) -> Result<()> {
    r.train("mnist-ce")?;
    r.train("mnist-ice")?;
    for name in ["mnist-ce", "mnist-ice"] {
        let mut cfg = r.follow_up(name, name, &format!("{name}-interpolate"))?;
        cfg.set("attack.kind", "interpolate")?;
        cfg.set("attack.probe", "true")?;
        let res = cmd_attack(&cfg)?;
        let n = res.interpolation_labels.len().max(1) as f64;
        let src = res.interpolation_labels.iter().filter(|(s, _, p)| s == p).count() as f64 / n;
        let tgt = res.interpolation_labels.iter().filter(|(_, t, p)| t == p).count() as f64 / n;
        let _ = writeln!(
            report,
            "{name:<10} endpoint probe label: source class {}%  target class {}%",
            pct(src),
            pct(tgt)
        );
    }
    let _ = writeln!(report, "\ntargets: ce endpoints mostly carry the target class, ice endpoints keep the source class");
    Ok(())
}

fn shift_table(r: &Reproduction, report: &mut String, prefix: &str, reference: [(f64, f64); 3]) -> Result<()> {
    let names = ["baseline", "ce", "ice"];
    let mut errs = Vec::new();
    for n in names {
        let res = r.train(&format!("{prefix}-{n}"))?;
        errs.push((err(&res.rows, "logit", "train"), err(&res.rows, "logit", "test_adv")));
    }
    let _ = writeln!(report, "% error             train    adv      reference train / adv");
    let labels = ["CE baseline", "CE invertible", "iCE invertible"];
    for ((l, (tr, adv)), (rt, ra)) in labels.iter().zip(&errs).zip(reference) {
        let _ = writeln!(report, "{l:<18} {}  {}   {rt:5.2} / {ra:5.2}", pct(*tr), pct(*adv));
    }
    let _ = writeln!(
        report,
        "{:<18} {}  {}   {:5.2} / {:5.2}",
        "difference",
        pct(errs[2].0 - errs[1].0),
        pct(errs[1].1 - errs[2].1),
        reference[2].0 - reference[1].0,
        reference[1].1 - reference[2].1
    );
    let _ = writeln!(report, "\nthe baseline is a small conv net standing in for a deep residual network");
    Ok(())
}

fn mnist_table2(r: &Reproduction, report: &mut String) -> Result<()> {
    let mut table = Vec::new();
    for name in ["mnist-ce", "mnist-ice"] {
        r.train(name)?;
        table.push(cmd_eval(&r.follow_up(name, name, &format!("{name}-eval"))?)?);
    }
    let _ = writeln!(report, "% error        CE logit  iCE logit  CE nuisance  iCE nuisance");
    for split in ["test_clean", "train"] {
        let _ = writeln!(
            report,
            "{split:<14} {}    {}     {}       {}",
            pct(err(&table[0], "logit", split)),
            pct(err(&table[1], "logit", split)),
            pct(err(&table[0], "probe", split)),
            pct(err(&table[1], "probe", split))
        );
    }
    let _ = writeln!(report, "reference test   0.39      0.38        0.34        27.70");
    let _ = writeln!(report, "reference train  0.00      0.37        0.00        40.21");
    Ok(())
}

/// Runs a reproduction and writes `report.txt` under `root`.
pub fn cmd_reproduce(id: &str, repro: &Reproduction) -> Result<PathBuf> {
    if !IDS.contains(&id) {
        return Err(CliError::Config(format!("unknown reproduction id {id:?}; available: {}", IDS.join(", "))));
    }
    let mut out = OutputDir::open(&repro.root)?;
    let mut report = format!("reproduction {id}\n\n");
    match id {
        "spheres-fig3" => spheres_fig3(repro, &mut report)?,
        "mnist-fig5" => mnist_fig5(repro, &mut report)?,
        "mnist-fig6" => mnist_fig6(repro, &mut report)?,
        "shiftmnist-binary" => shift_table(repro, &mut report, "binary", [(0.0, 73.80), (0.0, 57.09), (0.02, 34.73)])?,
        "shiftmnist-texture" => shift_table(repro, &mut report, "texture", [(0.0, 87.83), (0.18, 73.71), (0.53, 59.99)])?,
        _ => mnist_table2(repro, &mut report)?,
    }
    let _ = writeln!(report, "\nreference values are full-scale published numbers; desk-scale runs are not expected to match them");
    let path = out.write("report.txt", &report)?;
    let mut echo = Config::default();
    echo.set("experiment.name", id)?;
    echo.set("experiment.out", &repro.root.to_string_lossy())?;
    out.finish(&format!("reproduce {id}"), &echo)?;
    print!("{report}");
    Ok(path)
}
