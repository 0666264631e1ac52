//! Composition of invertible layers into a classifier with a latent split.
//!
//! An image network is a sequence of stages. A stage starts with a 2x2
//! squeeze when both spatial extents are even, runs its blocks, and then
//! (except for the last stage) routes the trailing half of its channels
//! straight to the latent code. The latent vector is
//!
//! ```text
//! z = [ flat(last stage) | flat(factored stage k-1) | ... | flat(factored stage 1) ]
//! ```
//!
//! where `flat` is row-major over (C, H, W), or the frequency-major DCT
//! layout when the split mode is dct-lowpass. Either way the semantic part
//! `z_s` is the first C entries of `z`.

use rand::Rng;

use super::layers::{ActNorm, BijectiveLayer, ChannelMix, Coupling, DctReadout, MixInit};
use super::subnet::Bind;
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitMode {
    FirstC,
    DctLowpass,
}

impl std::str::FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first-c" => Ok(Self::FirstC),
            "dct-lowpass" => Ok(Self::DctLowpass),
            o => Err(Error::Config(format!("unknown split mode {o:?} (expected one of: first-c, dct-lowpass)"))),
        }
    }
}

impl SplitMode {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::FirstC => "first-c",
            Self::DctLowpass => "dct-lowpass",
        }
    }
}

/// Partition of the d latent dimensions into C semantic and d - C nuisance ones.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LatentSplit {
    pub mode: SplitMode,
    pub classes: usize,
    pub dim: usize,
}

impl LatentSplit {
    pub fn new(mode: SplitMode, classes: usize, dim: usize) -> Result<Self> {
        if classes < 2 || classes >= dim {
            return Err(Error::Config(format!("need 2 <= classes < latent dim, got {classes} and {dim}")));
        }
        Ok(Self { mode, classes, dim })
    }

    pub fn nuisance_dim(&self) -> usize {
        self.dim - self.classes
    }

    pub fn semantic_indices(&self) -> std::ops::Range<usize> {
        0..self.classes
    }

    pub fn nuisance_indices(&self) -> std::ops::Range<usize> {
        self.classes..self.dim
    }

    pub fn split<'t>(&self, z: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let p = z.split(1, &[self.classes, self.nuisance_dim()])?;
        Ok((p[0], p[1]))
    }

    pub fn split_tensor(&self, z: &Tensor) -> Result<LatentCode> {
        let tape = Tape::new();
        let (zs, zn) = self.split(tape.constant(z.clone()))?;
        Ok(LatentCode {
            zs: zs.tensor(),
            zn: zn.tensor(),
        })
    }
}

/// Batch of latent codes: logits (N, C) and nuisances (N, d - C).
#[derive(Clone, Debug, PartialEq)]
pub struct LatentCode {
    pub zs: Tensor,
    pub zn: Tensor,
}

impl LatentCode {
    pub fn recombine(&self) -> Result<Tensor> {
        let tape = Tape::new();
        let z = tape.concat(&[tape.constant(self.zs.clone()), tape.constant(self.zn.clone())], 1)?;
        Ok(z.tensor())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CouplingKind {
    Additive,
    Affine,
}

impl std::str::FromStr for CouplingKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(Self::Additive),
            "affine" => Ok(Self::Affine),
            o => Err(Error::Config(format!("unknown coupling {o:?} (expected one of: additive, affine)"))),
        }
    }
}

/// Architecture description; enough to rebuild a network before loading
/// its parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct NetSpec {
    /// `[d]` for vector inputs or `[c, h, w]` for images.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub stages: usize,
    pub blocks: usize,
    pub width: usize,
    pub coupling: CouplingKind,
    pub actnorm: bool,
    pub mix: Option<MixInit>,
    pub split: SplitMode,
}

impl NetSpec {
    /// Fully connected net: additive couplings with alternating halves.
    pub fn dense(dim: usize, classes: usize, blocks: usize, width: usize) -> Self {
        Self {
            input_shape: vec![dim],
            classes,
            stages: 1,
            blocks,
            width,
            coupling: CouplingKind::Additive,
            actnorm: false,
            mix: None,
            split: SplitMode::FirstC,
        }
    }

    /// Multi-scale image net with actnorm, 1x1 mixing and additive couplings.
    pub fn image(shape: [usize; 3], classes: usize, stages: usize, blocks: usize, width: usize) -> Self {
        Self {
            input_shape: shape.to_vec(),
            classes,
            stages,
            blocks,
            width,
            coupling: CouplingKind::Additive,
            actnorm: true,
            mix: Some(MixInit::Orthogonal),
            split: SplitMode::FirstC,
        }
    }

    pub fn dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join("x");
        vec![
            ("input_shape".into(), join(&self.input_shape)),
            ("classes".into(), self.classes.to_string()),
            ("stages".into(), self.stages.to_string()),
            ("blocks".into(), self.blocks.to_string()),
            ("width".into(), self.width.to_string()),
            ("coupling".into(), match self.coupling {
                CouplingKind::Additive => "additive",
                CouplingKind::Affine => "affine",
            }.into()),
            ("actnorm".into(), self.actnorm.to_string()),
            ("mix".into(), match self.mix {
                None => "none",
                Some(MixInit::Identity) => "identity",
                Some(MixInit::Orthogonal) => "orthogonal",
            }.into()),
            ("split".into(), self.split.as_str().into()),
        ]
    }

    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let get = |k: &str| {
            pairs
                .iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Config(format!("network spec is missing {k}")))
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?.parse().map_err(|_| Error::Config(format!("network spec {k} is not an integer")))
        };
        let input_shape = get("input_shape")?
            .split('x')
            .map(|s| s.parse().map_err(|_| Error::Config("bad input_shape".into())))
            .collect::<Result<Vec<usize>>>()?;
        Ok(Self {
            input_shape,
            classes: num("classes")?,
            stages: num("stages")?,
            blocks: num("blocks")?,
            width: num("width")?,
            coupling: get("coupling")?.parse()?,
            actnorm: get("actnorm")? == "true",
            mix: match get("mix")? {
                "none" => None,
                "identity" => Some(MixInit::Identity),
                "orthogonal" => Some(MixInit::Orthogonal),
                o => return Err(Error::Config(format!("unknown mix init {o:?}"))),
            },
            split: get("split")?.parse()?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Stage {
    pub layers: Vec<BijectiveLayer>,
    /// Channels routed to the latent code after this stage.
    pub factor_out: usize,
}

/// Forward pass result on a tape.
pub struct NetOutput<'t> {
    /// Full latent, (N, d).
    pub z: Var<'t>,
    /// Per-sample log-determinant, (N,).
    pub logdet: Var<'t>,
}

#[derive(Clone, Debug)]
pub struct FullyInvertibleNet {
    pub spec: NetSpec,
    pub stages: Vec<Stage>,
    pub split: LatentSplit,
}

impl FullyInvertibleNet {
    pub fn build<R: Rng + ?Sized>(spec: &NetSpec, rng: &mut R) -> Result<Self> {
        let dim = spec.dim();
        let split = LatentSplit::new(spec.split, spec.classes, dim)?;
        let affine = spec.coupling == CouplingKind::Affine;
        let conv = spec.input_shape.len() == 3;
        if !conv && spec.input_shape.len() != 1 {
            return Err(Error::Config(format!("input shape {:?} must be [d] or [c, h, w]", spec.input_shape)));
        }
        if spec.stages == 0 || (!conv && spec.stages != 1) {
            return Err(Error::Config("vector nets have exactly one stage; image nets at least one".into()));
        }
        let mut shape = spec.input_shape.clone();
        let mut stages = Vec::with_capacity(spec.stages);
        for s in 0..spec.stages {
            let mut layers = Vec::new();
            if conv && shape[1] % 2 == 0 && shape[2] % 2 == 0 {
                layers.push(BijectiveLayer::Squeeze);
                shape = vec![shape[0] * 4, shape[1] / 2, shape[2] / 2];
            }
            let c = shape[0];
            for b in 0..spec.blocks {
                if spec.actnorm {
                    layers.push(BijectiveLayer::ActNorm(ActNorm::new(c)));
                }
                if let Some(init) = spec.mix {
                    layers.push(BijectiveLayer::ChannelMix(ChannelMix::new(c, init, rng)));
                }
                let coupling = Coupling::new(c, spec.width, affine, b % 2 == 1, conv, rng)?;
                layers.push(BijectiveLayer::Coupling(coupling));
            }
            let last = s + 1 == spec.stages;
            if last && spec.split == SplitMode::DctLowpass {
                if !conv || shape[1] != shape[2] {
                    return Err(Error::Config("dct-lowpass needs square image feature maps".into()));
                }
                layers.push(BijectiveLayer::DctReadout(DctReadout::new(c, shape[1])));
            }
            let factor_out = if last { 0 } else { c / 2 };
            if !last && c < 2 {
                return Err(Error::Config("cannot factor out channels from a single-channel stage".into()));
            }
            shape[0] -= factor_out;
            stages.push(Stage { layers, factor_out });
        }
        Ok(Self {
            spec: spec.clone(),
            stages,
            split,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    pub fn classes(&self) -> usize {
        self.split.classes
    }

    pub fn dim(&self) -> usize {
        self.split.dim
    }

    pub fn layers(&self) -> impl Iterator<Item = &BijectiveLayer> {
        self.stages.iter().flat_map(|s| s.layers.iter())
    }

    fn check_input(&self, x: &[usize]) -> Result<()> {
        if x.len() != self.spec.input_shape.len() + 1 || x[1..] != self.spec.input_shape[..] {
            let mut want = vec![0];
            want.extend(&self.spec.input_shape);
            return Err(Error::shape("net input", x, &want));
        }
        Ok(())
    }

    /// Runs the stages, calling `visit` with the full state (as a flat (N, d)
    /// tensor) after every layer when requested.
    fn run<'t>(
        &self,
        tape: &'t Tape,
        x: Var<'t>,
        mode: Bind,
        mut visit: Option<&mut dyn FnMut(Var<'t>) -> Result<()>>,
    ) -> Result<NetOutput<'t>> {
        let xs = x.shape();
        self.check_input(&xs)?;
        let n = xs[0];
        let mut h = x;
        let mut factored: Vec<Var<'t>> = Vec::new();
        let mut logdet: Option<Var<'t>> = None;
        for stage in &self.stages {
            for layer in &stage.layers {
                let (y, ld) = layer.forward(tape, h, mode)?;
                h = y;
                if let Some(ld) = ld {
                    logdet = Some(match logdet {
                        None => ld,
                        Some(acc) => acc.add(ld)?,
                    });
                }
                if let Some(v) = visit.as_mut() {
                    v(Self::assemble(tape, h, &factored)?)?;
                }
            }
            if stage.factor_out > 0 {
                let c = h.shape()[1];
                let parts = h.split(1, &[c - stage.factor_out, stage.factor_out])?;
                h = parts[0];
                factored.push(parts[1]);
            }
        }
        let z = Self::assemble(tape, h, &factored)?;
        let zeros = tape.constant(Tensor::zeros(&[n]));
        let logdet = match logdet {
            None => zeros,
            // (1,) contributions broadcast to every sample
            Some(ld) => zeros.add(ld)?,
        };
        Ok(NetOutput { z, logdet })
    }

    fn assemble<'t>(tape: &'t Tape, h: Var<'t>, factored: &[Var<'t>]) -> Result<Var<'t>> {
        if factored.is_empty() {
            return h.flatten();
        }
        let mut parts = vec![h.flatten()?];
        for f in factored.iter().rev() {
            parts.push(f.flatten()?);
        }
        tape.concat(&parts, 1)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, mode: Bind) -> Result<NetOutput<'t>> {
        self.run(tape, x, mode, None)
    }

    /// Inverse from a full (N, d) latent.
    pub fn inverse<'t>(&self, tape: &'t Tape, z: Var<'t>, mode: Bind) -> Result<Var<'t>> {
        let zs = z.shape();
        if zs.len() != 2 || zs[1] != self.dim() {
            return Err(Error::shape("net inverse", &zs, &[0, self.dim()]));
        }
        let n = zs[0];
        // per-stage shapes: state entering each stage and leaving it
        let mut shapes = Vec::new();
        let mut shape = self.spec.input_shape.clone();
        for stage in &self.stages {
            for layer in &stage.layers {
                if matches!(layer, BijectiveLayer::Squeeze) {
                    shape = vec![shape[0] * 4, shape[1] / 2, shape[2] / 2];
                }
            }
            shapes.push(shape.clone());
            shape[0] -= stage.factor_out;
        }
        let with_batch = |s: &[usize], c: usize| {
            let mut v = vec![n, c];
            v.extend(&s[1..]);
            v
        };
        let last = self.stages.len() - 1;
        let has_dct = matches!(self.stages[last].layers.last(), Some(BijectiveLayer::DctReadout(_)));
        let final_len: usize = shapes[last].iter().product();
        let mut sizes = vec![final_len];
        for (i, stage) in self.stages.iter().enumerate().rev().skip(1) {
            let per: usize = shapes[i][1..].iter().product();
            sizes.push(stage.factor_out * per);
        }
        let pieces = z.split(1, &sizes)?;
        let mut h = if has_dct {
            pieces[0]
        } else {
            pieces[0].reshape(&with_batch(&shapes[last], shapes[last][0]))?
        };
        for (k, (i, stage)) in self.stages.iter().enumerate().rev().enumerate() {
            if stage.factor_out > 0 {
                let f = pieces[k].reshape(&with_batch(&shapes[i], stage.factor_out))?;
                h = tape.concat(&[h, f], 1)?;
            }
            for layer in stage.layers.iter().rev() {
                h = layer.inverse(tape, h, mode)?;
            }
        }
        Ok(h)
    }

    /// Latent code and per-sample log-determinant with frozen parameters.
    pub fn encode(&self, x: &Tensor) -> Result<(LatentCode, Tensor)> {
        let tape = Tape::new();
        let out = self.forward(&tape, tape.constant(x.clone()), Bind::Frozen)?;
        let code = self.split.split_tensor(&out.z.tensor())?;
        Ok((code, out.logdet.tensor()))
    }

    pub fn latent(&self, x: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.forward(&tape, tape.constant(x.clone()), Bind::Frozen)?.z.tensor())
    }

    pub fn decode(&self, code: &LatentCode) -> Result<Tensor> {
        self.invert_latent(&code.recombine()?)
    }

    pub fn invert_latent(&self, z: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.inverse(&tape, tape.constant(z.clone()), Bind::Frozen)?.tensor())
    }

    /// Semantic part of the latent, (N, C).
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.encode(x)?.0.zs)
    }

    /// Argmax over the logits; ties go to the lowest (0-based) index.
    pub fn classify(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }

    /// Full state after every layer, each flattened to (N, d) with the
    /// already-factored channels appended as in the latent layout.
    pub fn intermediates(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let tape = Tape::new();
        let mut states = Vec::new();
        let mut visit = |v: Var<'_>| -> Result<()> {
            states.push(v.tensor());
            Ok(())
        };
        self.run(&tape, tape.constant(x.clone()), Bind::Frozen, Some(&mut visit))?;
        Ok(states)
    }

    /// Data-dependent actnorm initialization from a batch; layers already
    /// initialized are left alone.
    pub fn initialize(&mut self, x: &Tensor) -> Result<()> {
        self.check_input(x.shape())?;
        let mut h = x.clone();
        for stage in &mut self.stages {
            for layer in &mut stage.layers {
                if let BijectiveLayer::ActNorm(a) = layer {
                    if !a.is_initialized() {
                        a.init(&h)?;
                    }
                }
                h = layer.apply(&h)?.0;
            }
            if stage.factor_out > 0 {
                let tape = Tape::new();
                let c = h.shape()[1];
                h = tape.constant(h).narrow(1, 0, c - stage.factor_out)?.tensor();
            }
        }
        Ok(())
    }

    /// Marks every actnorm as initialized (used after loading parameters).
    pub fn mark_initialized(&mut self) {
        for stage in &mut self.stages {
            for layer in &mut stage.layers {
                if let BijectiveLayer::ActNorm(a) = layer {
                    a.mark_initialized();
                }
            }
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter().enumerate() {
            for (l, layer) in stage.layers.iter().enumerate() {
                for (name, p) in layer.named_params() {
                    out.push((format!("s{s}.l{l}.{name}"), p));
                }
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        let mut out = Vec::new();
        for (s, stage) in self.stages.iter_mut().enumerate() {
            for (l, layer) in stage.layers.iter_mut().enumerate() {
                for (name, p) in layer.named_params_mut() {
                    out.push((format!("s{s}.l{l}.{name}"), p));
                }
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.named_params_mut().into_iter().map(|(_, p)| p).collect()
    }

    pub fn num_params(&self) -> usize {
        self.named_params().iter().map(|(_, p)| p.value.numel()).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;

    #[test]
    fn mnist_shaped_latent_layout() {
        let spec = NetSpec::image([1, 28, 28], 10, 3, 1, 4);
        let mut net = FullyInvertibleNet::build(&spec, &mut rng_from_seed(0)).unwrap();
        assert_eq!(net.stages[0].factor_out, 2);
        assert_eq!(net.stages[1].factor_out, 4);
        assert!(!matches!(net.stages[2].layers[0], BijectiveLayer::Squeeze));
        let x = Tensor::uniform(&[2, 1, 28, 28], 0.0, 1.0, &mut rng_from_seed(1));
        net.initialize(&x).unwrap();
        let z = net.latent(&x).unwrap();
        assert_eq!(z.shape(), &[2, 784]);
    }

    #[test]
    fn classify_ties_low() {
        let split = LatentSplit::new(SplitMode::FirstC, 3, 5).unwrap();
        let code = split.split_tensor(&Tensor::new(&[2, 5], vec![0.1, 2.0, 0.1, 9.0, 9.0, 1.0, 1.0, 1.0, 0.0, 0.0]).unwrap()).unwrap();
        assert_eq!(code.zs.argmax_rows(), vec![1, 0]);
    }

    #[test]
    fn spec_round_trips_through_pairs() {
        let mut spec = NetSpec::image([1, 8, 8], 4, 2, 2, 16);
        spec.split = SplitMode::DctLowpass;
        assert_eq!(NetSpec::from_pairs(&spec.to_pairs()).unwrap(), spec);
    }
}
