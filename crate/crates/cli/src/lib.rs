//! Command-line harness: config parsing, training and attack commands, and
//! the bundled reproduction recipes.

pub mod commands;
pub mod config;
pub mod data;
pub mod error;
pub mod output;
pub mod reproduce;
pub mod run;

use std::path::PathBuf;

use clap::{Parser, ValueEnum};

pub use config::Config;
pub use error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Command {
    Train,
    Attack,
    Eval,
    Slice,
    Reproduce,
}

/// Train, attack and inspect fully invertible classifiers.
#[derive(Debug, Parser)]
#[command(name = "invariant-lens", version, after_help = AFTER_HELP)]
pub struct Args {
    pub command: Command,
    /// Reproduction id (reproduce only).
    pub id: Option<String>,
    /// Experiment config; required except for reproduce.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides experiment.seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides experiment.out.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Full-scale settings (long runs, no acceptance guarantees).
    #[arg(long)]
    pub full: bool,
}

const AFTER_HELP: &str = "Reproduction ids: spheres-fig3, mnist-fig5, mnist-fig6, shiftmnist-binary, \
shiftmnist-texture, mnist-table2.\nMNIST is read from mnist.dir, $INVLENS_DATA_DIR or data/mnist.\n\
Exit codes: 0 success, 2 config error, 3 runtime error.";

pub fn run(args: &Args) -> Result<()> {
    let mut cfg = match &args.config {
        Some(p) => Some(Config::load(p)?),
        None if args.command == Command::Reproduce => None,
        None => return Err(CliError::Config("--config <path> is required for this command".into())),
    };
    if args.command != Command::Reproduce && args.id.is_some() {
        return Err(CliError::Config("only reproduce takes a positional id".into()));
    }
    if let Some(c) = cfg.as_mut() {
        if let Some(s) = args.seed {
            c.set("experiment.seed", &s.to_string())?;
        }
        if let Some(o) = &args.out {
            c.set("experiment.out", &o.to_string_lossy())?;
        }
        if args.full && args.command != Command::Reproduce {
            reproduce::apply_full_profile(c)?;
        }
    }
    match args.command {
        Command::Train => {
            let r = commands::cmd_train(cfg.as_ref().unwrap())?;
            print!("{}", commands::eval_csv(&r.rows));
        }
        Command::Eval => print!("{}", commands::eval_csv(&commands::cmd_eval(cfg.as_ref().unwrap())?)),
        Command::Attack => {
            let r = commands::cmd_attack(cfg.as_ref().unwrap())?;
            if let Some(m) = r.metamers {
                println!("pairs {} max logit residual {:e} mse {:e}", r.pairs.len(), m.semantic_residual, m.mse);
            }
        }
        Command::Slice => {
            for s in commands::cmd_slice(cfg.as_ref().unwrap())? {
                println!("{} {} corridor {:.4} inner {:.4}", s.plane, s.readout, s.corridor, s.inner);
            }
        }
        Command::Reproduce => {
            let id = args.id.clone().ok_or_else(|| {
                CliError::Config(format!("reproduce needs an id; available: {}", reproduce::IDS.join(", ")))
            })?;
            let mut overlay = cfg.unwrap_or_default();
            if let Some(s) = args.seed {
                overlay.set("experiment.seed", &s.to_string())?;
            }
            let root = args.out.clone().unwrap_or_else(|| PathBuf::from("runs").join(&id));
            let repro = reproduce::Reproduction { root, overlay: Some(overlay), full: args.full };
            reproduce::cmd_reproduce(&id, &repro)?;
        }
    }
    Ok(())
}
