//! Experiment configuration: INI-style `key = value` lines under `[section]`
//! headers, validated against a fixed schema.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ini::Ini;

use crate::error::CliError;

#[derive(Clone, Copy, Debug)]
enum Kind {
    Str,
    Int,
    Float,
    Bool,
    OneOf(&'static [&'static str]),
}

struct Key {
    name: &'static str,
    default: &'static str,
    kind: Kind,
    help: &'static str,
}

const fn key(name: &'static str, default: &'static str, kind: Kind, help: &'static str) -> Key {
    Key { name, default, kind, help }
}

use Kind::*;

pub const DATASETS: &[&str] = &["spheres", "mnist", "shiftmnist-binary", "shiftmnist-texture"];

static SCHEMA: &[Key] = &[
    key("experiment.name", "run", Str, "run name, used for the default output directory"),
    key("experiment.dataset", "spheres", OneOf(DATASETS), "dataset family"),
    key("experiment.seed", "0", Int, "master seed; per-component seeds derive from it"),
    key("experiment.out", "", Str, "output directory (default runs/<name>)"),
    key("experiment.checkpoint", "", Str, "checkpoint to read (default <out>/checkpoint.fire)"),
    key("spheres.d", "100", Int, "ambient dimension"),
    key("spheres.r1", "1", Float, "inner radius"),
    key("spheres.r2", "10", Float, "outer radius"),
    key("spheres.n_train", "20000", Int, "training points"),
    key("spheres.n_test", "2000", Int, "held-out points"),
    key("mnist.dir", "", Str, "IDX directory (default $INVLENS_DATA_DIR, then data/mnist)"),
    key("mnist.n_train", "10000", Int, "cap on training images"),
    key("mnist.n_test", "2000", Int, "cap on test images"),
    key("mnist.dequantize", "true", Bool, "add uniform noise to training batches"),
    key("mnist.augment_shift", "0", Int, "random shift augmentation in pixels"),
    key("shift.textures", "procedural", Str, "texture source: procedural or a directory of PGM patches"),
    key("shift.contrast", "0.5", Float, "texture amplitude"),
    key("model.kind", "invertible", OneOf(&["invertible", "baseline"]), "fully invertible net or non-invertible baseline"),
    key("model.layout", "auto", OneOf(&["auto", "dense", "conv"]), "auto picks conv for mnist, dense otherwise"),
    key("model.stages", "3", Int, "conv stages"),
    key("model.blocks", "4", Int, "coupling blocks per stage"),
    key("model.width", "64", Int, "hidden width of coupling subnets"),
    key("model.coupling", "additive", OneOf(&["additive", "affine"]), "coupling type"),
    key("model.split", "first-c", OneOf(&["first-c", "dct-lowpass"]), "which latent entries are logits"),
    key("model.baseline_hidden", "256", Int, "hidden width of the dense baseline"),
    key("model.baseline_filters", "16x32", Str, "conv baseline filter counts"),
    key("objective.kind", "ce", OneOf(&["ce", "ice"]), "training objective"),
    key("objective.lambda_n", "1", Float, "weight of the nuisance cross-entropy"),
    key("objective.lambda_m", "1", Float, "weight of the nuisance likelihood"),
    key("objective.k_nc", "1", Int, "nuisance classifier steps per network step"),
    key("objective.warmup_steps", "0", Int, "network steps over which lambda_n ramps up from 0"),
    key("objective.nc_hidden", "256", Int, "nuisance classifier width"),
    key("objective.nc_layers", "3", Int, "nuisance classifier depth"),
    key("objective.nc_lr", "0.001", Float, "nuisance classifier learning rate"),
    key("optim.kind", "adam", OneOf(&["adam", "sgd"]), "optimizer"),
    key("optim.lr", "0.001", Float, "learning rate"),
    key("optim.lr_decay", "1", Float, "per-epoch learning-rate factor"),
    key("optim.weight_decay", "0", Float, "L2 weight decay"),
    key("optim.epochs", "10", Int, "training epochs"),
    key("optim.batch_size", "64", Int, "minibatch size"),
    key("probe.hidden", "256", Int, "post-hoc probe width"),
    key("probe.layers", "3", Int, "post-hoc probe depth"),
    key("probe.epochs", "20", Int, "post-hoc probe epochs"),
    key("probe.lr", "0.001", Float, "post-hoc probe learning rate"),
    key("probe.batch_size", "128", Int, "post-hoc probe minibatch size"),
    key("attack.kind", "exact", OneOf(&["exact", "gradient", "interpolate"]), "attack to run"),
    key("attack.pairs", "8", Int, "number of (semantic, nuisance) pairs"),
    key("attack.iterations", "3000", Int, "gradient attack iterations"),
    key("attack.lr", "0.01", Float, "gradient attack learning rate"),
    key("attack.steps", "8", Int, "interpolation steps"),
    key("attack.probe", "false", Bool, "label interpolants with an independently trained classifier"),
    key("slice.grid", "201", Int, "grid points per side"),
    key("log.every", "1", Int, "write a metrics row every N steps"),
];

/// A validated configuration; every schema key has a value.
#[derive(Clone, Debug, PartialEq)]
pub struct Config {
    values: BTreeMap<&'static str, String>,
    /// Keys set by a file or override rather than left at their default.
    explicit: BTreeSet<&'static str>,
}

fn schema_key(name: &str) -> Option<&'static Key> {
    SCHEMA.iter().find(|k| k.name == name)
}

fn section_keys(section: &str) -> Vec<&'static str> {
    SCHEMA
        .iter()
        .filter(|k| k.name.split('.').next() == Some(section))
        .map(|k| k.name.split('.').nth(1).unwrap())
        .collect()
}

fn check(k: &Key, value: &str) -> Result<(), CliError> {
    let bad = |expected: String| CliError::Config(format!("invalid value {value:?} for {}: expected {expected}", k.name));
    match k.kind {
        Str => Ok(()),
        Int => value.parse::<u64>().map(|_| ()).map_err(|_| bad("a non-negative integer".into())),
        Float => match value.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(()),
            _ => Err(bad("a finite number".into())),
        },
        Bool => match value {
            "true" | "false" => Ok(()),
            _ => Err(bad("one of: true, false".into())),
        },
        OneOf(options) if options.contains(&value) => Ok(()),
        OneOf(options) => Err(bad(format!("one of: {}", options.join(", ")))),
    }
}

impl Default for Config {
    fn default() -> Self {
        Self {
            values: SCHEMA.iter().map(|k| (k.name, k.default.to_string())).collect(),
            explicit: BTreeSet::new(),
        }
    }
}

impl Config {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let ini = Ini::load_from_str(text).map_err(|e| CliError::Config(format!("malformed config: {e}")))?;
        let mut cfg = Self::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(CliError::Config(format!("key {k:?} appears before any [section] header")));
                }
                continue;
            };
            let allowed = section_keys(section);
            if allowed.is_empty() {
                let mut sections: Vec<&str> = SCHEMA.iter().map(|k| k.name.split('.').next().unwrap()).collect();
                sections.dedup();
                return Err(CliError::Config(format!(
                    "unknown section [{section}]; allowed sections: {}",
                    sections.join(", ")
                )));
            }
            for (k, v) in props.iter() {
                let full = format!("{section}.{k}");
                let entry = schema_key(&full).ok_or_else(|| {
                    CliError::Config(format!("unknown key {full}; allowed keys in [{section}]: {}", allowed.join(", ")))
                })?;
                if props.get_all(k).count() > 1 {
                    return Err(CliError::Config(format!("key {full} is set more than once")));
                }
                cfg.set(entry.name, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Sets a key by its full `section.key` name after validation.
    pub fn set(&mut self, name: &str, value: &str) -> Result<(), CliError> {
        let k = schema_key(name).ok_or_else(|| CliError::Config(format!("unknown key {name}")))?;
        let value = value.trim();
        check(k, value)?;
        self.values.insert(k.name, value.to_string());
        self.explicit.insert(k.name);
        Ok(())
    }

    pub fn with(mut self, name: &str, value: &str) -> Result<Self, CliError> {
        self.set(name, value)?;
        Ok(self)
    }

    /// Copies every explicitly set key of `other` except those in `skip`.
    pub fn overlay(&mut self, other: &Config, skip: &[&str]) {
        for k in &other.explicit {
            if !skip.contains(k) {
                self.values.insert(k, other.values[k].clone());
                self.explicit.insert(k);
            }
        }
    }

    pub fn str(&self, name: &str) -> &str {
        self.values.get(name).unwrap_or_else(|| panic!("{name} is not a schema key"))
    }

    pub fn usize(&self, name: &str) -> usize {
        self.str(name).parse().expect("validated integer")
    }

    pub fn u64(&self, name: &str) -> u64 {
        self.str(name).parse().expect("validated integer")
    }

    pub fn f64(&self, name: &str) -> f64 {
        self.str(name).parse().expect("validated number")
    }

    pub fn bool(&self, name: &str) -> bool {
        self.str(name) == "true"
    }

    pub fn seed(&self) -> u64 {
        self.u64("experiment.seed")
    }

    pub fn out_dir(&self) -> PathBuf {
        match self.str("experiment.out") {
            "" => Path::new("runs").join(self.str("experiment.name")),
            p => PathBuf::from(p),
        }
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        match self.str("experiment.checkpoint") {
            "" => self.out_dir().join("checkpoint.fire"),
            p => PathBuf::from(p),
        }
    }

    /// Conv for plain MNIST, dense for everything else unless set.
    pub fn layout(&self) -> &str {
        match (self.str("model.layout"), self.str("experiment.dataset")) {
            ("auto", "mnist") => "conv",
            ("auto", _) => "dense",
            (l, _) => l,
        }
    }

    /// The resolved configuration, every key included, in parseable form.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for k in SCHEMA {
            let (s, name) = k.name.split_once('.').unwrap();
            if s != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                let _ = writeln!(out, "[{s}]");
                section = s;
            }
            let _ = writeln!(out, "{name} = {}", self.values[k.name]);
        }
        out
    }

    /// One line per key with its default and meaning.
    pub fn describe() -> String {
        let mut out = String::new();
        for k in SCHEMA {
            let kind = match k.kind {
                OneOf(o) => o.join("|"),
                Str => "text".into(),
                Int => "integer".into(),
                Float => "number".into(),
                Bool => "true|false".into(),
            };
            let _ = writeln!(out, "{:<26} {:<40} default {:?}: {}", k.name, kind, k.default, k.help);
        }
        out
    }
}
