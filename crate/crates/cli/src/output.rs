//! Output directories: exclusive lock, file inventory and run manifest.

use std::fmt::Write as _;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use invlens_core::objectives::LossReport;
use sha2::{Digest, Sha256};

use crate::config::Config;
use crate::error::{CliError, Result};

const LOCK: &str = ".lock";

pub struct OutputDir {
    root: PathBuf,
    files: Vec<String>,
    started: u64,
    clock: Instant,
}

impl OutputDir {
    /// Creates `root` and takes its lock; fails if another run holds it.
    pub fn open(root: &Path) -> Result<Self> {
        fs::create_dir_all(root)?;
        OpenOptions::new().write(true).create_new(true).open(root.join(LOCK)).map_err(|e| {
            CliError::Runtime(format!(
                "output directory {} is locked ({e}); remove {LOCK} there if no other run is using it",
                root.display()
            ))
        })?;
        Ok(Self {
            root: root.to_path_buf(),
            files: Vec::new(),
            started: SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
            clock: Instant::now(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Path of `rel` inside the directory, recorded for the manifest.
    pub fn file(&mut self, rel: &str) -> PathBuf {
        if !self.files.iter().any(|f| f == rel) {
            self.files.push(rel.to_string());
        }
        self.root.join(rel)
    }

    pub fn write(&mut self, rel: &str, text: &str) -> Result<PathBuf> {
        let p = self.file(rel);
        fs::write(&p, text)?;
        Ok(p)
    }

    /// Writes `manifest.txt`: version, timing, the resolved config and a
    /// SHA-256 for every registered file.
    pub fn finish(self, command: &str, cfg: &Config) -> Result<PathBuf> {
        let mut m = String::new();
        let _ = writeln!(m, "version = {}", version());
        let _ = writeln!(m, "command = {command}");
        let _ = writeln!(m, "started_unix = {}", self.started);
        let _ = writeln!(m, "wall_clock_seconds = {:.3}", self.clock.elapsed().as_secs_f64());
        let _ = writeln!(m, "\n# resolved config\n{}", cfg.to_text());
        let _ = writeln!(m, "# files: sha256 bytes path");
        for rel in &self.files {
            let bytes = fs::read(self.root.join(rel))
                .map_err(|e| CliError::Runtime(format!("registered output {rel} is missing: {e}")))?;
            let _ = writeln!(m, "{} {} {rel}", hex::encode(Sha256::digest(&bytes)), bytes.len());
        }
        let path = self.root.join("manifest.txt");
        fs::write(&path, m)?;
        Ok(path)
    }
}

impl Drop for OutputDir {
    fn drop(&mut self) {
        let _ = fs::remove_file(self.root.join(LOCK));
    }
}

pub fn version() -> String {
    let git = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .map(|o| String::from_utf8_lossy(&o.stdout).trim().to_string());
    match git {
        Some(g) if !g.is_empty() => format!("invariant-lens {} ({g})", env!("CARGO_PKG_VERSION")),
        _ => format!("invariant-lens {}", env!("CARGO_PKG_VERSION")),
    }
}

/// Formats a metric; NaN is written as `nan`.
pub fn num(v: f64) -> String {
    if v.is_nan() {
        "nan".into()
    } else {
        format!("{v}")
    }
}

pub const METRICS_HEADER: &str = "step,sCE,nCE,MLE_n,mi_lower_bound,semantic_train_acc,nuisance_train_acc";

/// Streams training metrics rows.
pub struct MetricsWriter {
    out: std::io::BufWriter<fs::File>,
    every: usize,
}

impl MetricsWriter {
    pub fn create(path: &Path, every: usize) -> Result<Self> {
        let mut out = std::io::BufWriter::new(fs::File::create(path)?);
        writeln!(out, "{METRICS_HEADER}")?;
        Ok(Self { out, every: every.max(1) })
    }

    pub fn row(&mut self, step: usize, r: &LossReport) -> Result<()> {
        if step % self.every == 0 {
            writeln!(
                self.out,
                "{step},{},{},{},{},{},{}",
                num(r.sce),
                num(r.nce),
                num(r.mle_n),
                num(r.mi_lower_bound),
                num(r.semantic_acc),
                num(r.nuisance_acc)
            )?;
        }
        Ok(())
    }

    pub fn close(mut self) -> Result<()> {
        self.out.flush()?;
        Ok(())
    }
}
