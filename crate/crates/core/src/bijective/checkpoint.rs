//! Binary checkpoint files.
//!
//! Layout: the magic bytes `FIREV1`, a little-endian u64 manifest length,
//! the UTF-8 manifest, then every parameter as raw little-endian f64 values
//! in manifest order. Manifest lines:
//!
//! ```text
//! section <name> <kind>
//! spec <key>=<value>
//! param <name> <d0>x<d1>x...
//! ```
//!
//! `spec` and `param` lines belong to the preceding section.

use std::path::Path;

use super::net::{FullyInvertibleNet, NetSpec};
use crate::error::{Error, Result};
use crate::rng::rng_from_seed;
use crate::tensor::{Parameter, Tensor};

pub const MAGIC: &[u8; 6] = b"FIREV1";

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Section {
    pub name: String,
    pub kind: String,
    pub spec: Vec<(String, String)>,
    pub params: Vec<(String, Tensor)>,
}

impl Section {
    pub fn new(name: &str, kind: &str) -> Self {
        Self {
            name: name.into(),
            kind: kind.into(),
            ..Self::default()
        }
    }

    pub fn with_params<'a>(mut self, params: impl IntoIterator<Item = (String, &'a Parameter)>) -> Self {
        for (n, p) in params {
            let mut t = p.value.clone();
            t.requires_grad = false;
            t.grad = None;
            self.params.push((n, t));
        }
        self
    }

    pub fn spec_value(&self, key: &str) -> Option<&str> {
        self.spec.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    /// Copies stored values into `targets`, which must match by name and shape.
    pub fn load_into(&self, targets: Vec<(String, &mut Parameter)>) -> Result<()> {
        if targets.len() != self.params.len() {
            return Err(Error::Config(format!(
                "section {} stores {} parameters but the model has {}",
                self.name,
                self.params.len(),
                targets.len()
            )));
        }
        for (name, p) in targets {
            let (_, t) = self
                .params
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Config(format!("section {} lacks parameter {name}", self.name)))?;
            if t.shape() != p.shape() {
                return Err(Error::shape("checkpoint load", t.shape(), p.shape()));
            }
            p.value.data_mut().copy_from_slice(t.data());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub sections: Vec<Section>,
}

fn format_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        detail: detail.into(),
    }
}

impl Checkpoint {
    pub fn section(&self, name: &str) -> Option<&Section> {
        self.sections.iter().find(|s| s.name == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = String::new();
        for s in &self.sections {
            manifest.push_str(&format!("section {} {}\n", s.name, s.kind));
            for (k, v) in &s.spec {
                manifest.push_str(&format!("spec {k}={v}\n"));
            }
            for (n, t) in &s.params {
                let dims: Vec<String> = t.shape().iter().map(ToString::to_string).collect();
                manifest.push_str(&format!("param {n} {}\n", dims.join("x")));
            }
        }
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        for s in &self.sections {
            for (_, t) in &s.params {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 14 || &bytes[..6] != MAGIC {
            return Err(format_err(path, "not a checkpoint (bad magic)"));
        }
        let len = u64::from_le_bytes(bytes[6..14].try_into().unwrap()) as usize;
        let manifest = bytes
            .get(14..14 + len)
            .ok_or_else(|| format_err(path, "truncated manifest"))?;
        let manifest = std::str::from_utf8(manifest).map_err(|_| format_err(path, "manifest is not UTF-8"))?;
        let mut blob = &bytes[14 + len..];
        let mut sections: Vec<Section> = Vec::new();
        for (ln, line) in manifest.lines().enumerate() {
            let bad = || format_err(path, format!("manifest line {}: {line:?}", ln + 1));
            let mut words = line.splitn(3, ' ');
            match (words.next(), words.next(), words.next()) {
                (Some("section"), Some(name), Some(kind)) => sections.push(Section::new(name, kind)),
                (Some("spec"), Some(kv), None) => {
                    let (k, v) = kv.split_once('=').ok_or_else(bad)?;
                    sections.last_mut().ok_or_else(bad)?.spec.push((k.into(), v.into()));
                }
                (Some("param"), Some(name), Some(dims)) => {
                    let shape = dims
                        .split('x')
                        .map(|d| d.parse::<usize>().map_err(|_| bad()))
                        .collect::<Result<Vec<_>>>()?;
                    let n: usize = shape.iter().product();
                    if blob.len() < 8 * n {
                        return Err(format_err(path, format!("parameter {name} is truncated")));
                    }
                    let data = blob[..8 * n]
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    blob = &blob[8 * n..];
                    let t = Tensor::new(&shape, data).map_err(|_| bad())?;
                    sections.last_mut().ok_or_else(bad)?.params.push((name.into(), t));
                }
                _ => return Err(bad()),
            }
        }
        if !blob.is_empty() {
            return Err(format_err(path, format!("{} trailing bytes after the last parameter", blob.len())));
        }
        Ok(Self { sections })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, path)
    }
}

impl FullyInvertibleNet {
    pub fn to_section(&self, name: &str) -> Section {
        let mut s = Section::new(name, "fully-invertible-net").with_params(self.named_params());
        s.spec = self.spec.to_pairs();
        s
    }

    /// Rebuilds the architecture from the section's spec and loads its values.
    pub fn from_section(section: &Section) -> Result<Self> {
        if section.kind != "fully-invertible-net" {
            return Err(Error::Config(format!("section {} holds a {}, not a network", section.name, section.kind)));
        }
        let spec = NetSpec::from_pairs(&section.spec)?;
        let mut net = FullyInvertibleNet::build(&spec, &mut rng_from_seed(0))?;
        section.load_into(net.named_params_mut())?;
        net.mark_initialized();
        Ok(net)
    }
}
