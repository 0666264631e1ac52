//! Invertible layers. Each maps batch-first tensors and reports a
//! log-determinant that is either absent (volume preserving), a (1,) value
//! shared by the batch, or a per-sample (N,) value.

use rand::Rng;

use super::subnet::{bind, Bind, Subnet};
use crate::error::{Error, Result};
use crate::tensor::{matrix_inverse, Parameter, Tape, Tensor, Var};

/// Smallest std used by data-dependent actnorm init.
pub const ACTNORM_MIN_STD: f64 = 1e-6;
/// Affine-coupling raw scales are clamped to `[-SCALE_CLAMP, SCALE_CLAMP]`
/// before the exponential.
pub const SCALE_CLAMP: f64 = 2.0;

pub type LayerOut<'t> = (Var<'t>, Option<Var<'t>>);

fn spatial(shape: &[usize]) -> usize {
    shape[2..].iter().product()
}

/// Shape that broadcasts a (C,) vector over channel axis 1.
fn channel_shape(rank: usize, c: usize) -> Vec<usize> {
    let mut s = vec![c];
    s.extend(std::iter::repeat_n(1, rank.saturating_sub(2)));
    s
}

fn check_channels(op: &'static str, x: &Var<'_>, c: usize) -> Result<()> {
    let s = x.shape();
    if s.len() < 2 || s[1] != c {
        return Err(Error::ShapeMismatch {
            op,
            left: s,
            right: vec![0, c],
        });
    }
    Ok(())
}

/// `y = s * (x + b)` per channel.
#[derive(Clone, Debug)]
pub struct ActNorm {
    pub scale: Parameter,
    pub bias: Parameter,
    initialized: bool,
}

impl ActNorm {
    /// Uninitialized layer; call [`ActNorm::init`] on a data batch first.
    pub fn new(channels: usize) -> Self {
        Self {
            scale: Parameter::new(Tensor::ones(&[channels])),
            bias: Parameter::new(Tensor::zeros(&[channels])),
            initialized: false,
        }
    }

    /// Layer with given parameters, marked initialized.
    pub fn with_params(scale: Tensor, bias: Tensor) -> Self {
        Self {
            scale: Parameter::new(scale),
            bias: Parameter::new(bias),
            initialized: true,
        }
    }

    pub fn channels(&self) -> usize {
        self.scale.value.numel()
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    /// Data-dependent init: the batch comes out per-channel zero-mean and unit
    /// (population) variance. Constant channels use std 1e-6.
    pub fn init(&mut self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        let c = self.channels();
        if s.len() < 2 || s[1] != c {
            return Err(Error::shape("actnorm init", s, &[0, c]));
        }
        if s[0] < 2 {
            return Err(Error::Config("actnorm init needs a batch of at least 2".into()));
        }
        let (n, sp) = (s[0], spatial_or_one(s));
        let count = (n * sp) as f64;
        for ch in 0..c {
            let vals = (0..n).flat_map(|i| {
                let base = (i * c + ch) * sp;
                x.data()[base..base + sp].iter().copied()
            });
            let mean = vals.clone().sum::<f64>() / count;
            let var = vals.map(|v| (v - mean) * (v - mean)).sum::<f64>() / count;
            self.bias.value.data_mut()[ch] = -mean;
            self.scale.value.data_mut()[ch] = 1.0 / var.sqrt().max(ACTNORM_MIN_STD);
        }
        self.initialized = true;
        Ok(())
    }

    fn check(&self) -> Result<()> {
        if !self.initialized {
            return Err(Error::Uninitialized);
        }
        if let Some(c) = self.scale.value.data().iter().position(|&v| v == 0.0) {
            return Err(Error::NotInvertible(format!("actnorm scale of channel {c} is zero")));
        }
        Ok(())
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, mode: Bind) -> Result<LayerOut<'t>> {
        self.check()?;
        check_channels("actnorm", &x, self.channels())?;
        let shape = x.shape();
        let cs = channel_shape(shape.len(), self.channels());
        let s = bind(tape, &self.scale, mode);
        let b = bind(tape, &self.bias, mode);
        let y = x.add(b.reshape(&cs)?)?.mul(s.reshape(&cs)?)?;
        // log|s| as 0.5 log(s^2) keeps the gradient defined for negative s
        let logdet = s.square().log()?.sum_all().scale(0.5 * spatial_or_one(&shape) as f64);
        Ok((y, Some(logdet)))
    }

    pub fn inverse<'t>(&self, tape: &'t Tape, y: Var<'t>, mode: Bind) -> Result<Var<'t>> {
        self.check()?;
        check_channels("actnorm", &y, self.channels())?;
        let cs = channel_shape(y.shape().len(), self.channels());
        let s = bind(tape, &self.scale, mode).reshape(&cs)?;
        let b = bind(tape, &self.bias, mode).reshape(&cs)?;
        y.div(s)?.sub(b)
    }
}

fn spatial_or_one(shape: &[usize]) -> usize {
    if shape.len() > 2 {
        spatial(shape)
    } else {
        1
    }
}

/// Coupling on the two channel halves: one half conditions the subnet, the
/// other half is shifted (additive) or scaled and shifted (affine).
#[derive(Clone, Debug)]
pub struct Coupling {
    pub subnet: Subnet,
    pub affine: bool,
    /// When set the second half conditions and the first half is updated.
    pub swap: bool,
    channels: usize,
}

impl Coupling {
    /// `channels` is the size of axis 1; `conv` selects a convolutional subnet.
    pub fn new<R: Rng + ?Sized>(channels: usize, hidden: usize, affine: bool, swap: bool, conv: bool, rng: &mut R) -> Result<Self> {
        if channels < 2 || channels % 2 != 0 {
            return Err(Error::Config(format!("coupling needs an even channel count, got {channels}")));
        }
        let half = channels / 2;
        let out = if affine { 2 * half } else { half };
        let subnet = if conv {
            Subnet::conv(half, hidden, out, rng)
        } else {
            Subnet::dense(half, hidden, out, rng)
        };
        Ok(Self {
            subnet,
            affine,
            swap,
            channels,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    fn halves<'t>(&self, x: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        check_channels("coupling", &x, self.channels)?;
        let h = self.channels / 2;
        let p = x.split(1, &[h, h])?;
        Ok(if self.swap { (p[1], p[0]) } else { (p[0], p[1]) })
    }

    fn join<'t>(&self, tape: &'t Tape, cond: Var<'t>, act: Var<'t>) -> Result<Var<'t>> {
        if self.swap {
            tape.concat(&[act, cond], 1)
        } else {
            tape.concat(&[cond, act], 1)
        }
    }

    /// Returns (shift, log-scale) from the conditioning half.
    fn params_of<'t>(&self, tape: &'t Tape, cond: Var<'t>, mode: Bind) -> Result<(Var<'t>, Option<Var<'t>>)> {
        let out = self.subnet.forward(tape, cond, mode)?;
        if !self.affine {
            return Ok((out, None));
        }
        let h = self.channels / 2;
        let raw = out.narrow(1, 0, h)?;
        let t = out.narrow(1, h, h)?;
        Ok((t, Some(raw.clamp(-SCALE_CLAMP, SCALE_CLAMP))))
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, mode: Bind) -> Result<LayerOut<'t>> {
        let (cond, act) = self.halves(x)?;
        let (t, log_s) = self.params_of(tape, cond, mode)?;
        let (act, logdet) = match log_s {
            None => (act.add(t)?, None),
            Some(ls) => (act.mul(ls.exp())?.add(t)?, Some(ls.sum_per_sample()?)),
        };
        Ok((self.join(tape, cond, act)?, logdet))
    }

    pub fn inverse<'t>(&self, tape: &'t Tape, y: Var<'t>, mode: Bind) -> Result<Var<'t>> {
        let (cond, act) = self.halves(y)?;
        let (t, log_s) = self.params_of(tape, cond, mode)?;
        let act = match log_s {
            None => act.sub(t)?,
            Some(ls) => act.sub(t)?.mul(ls.neg().exp())?,
        };
        self.join(tape, cond, act)
    }
}

/// Initial value of a channel-mixing matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixInit {
    Identity,
    Orthogonal,
}

/// Invertible 1x1 convolution: `y = W x` at every spatial location.
#[derive(Clone, Debug)]
pub struct ChannelMix {
    pub weight: Parameter,
}

/// Random orthogonal matrix from the QR factorization of a Gaussian one.
pub fn random_orthogonal<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Tensor {
    let g = Tensor::randn(&[n, n], 1.0, rng);
    let qr = nalgebra::DMatrix::from_row_slice(n, n, g.data()).qr();
    let (q, r) = (qr.q(), qr.r());
    // fix column signs so the distribution is uniform
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            data[i * n + j] = q[(i, j)] * r[(j, j)].signum();
        }
    }
    Tensor::new(&[n, n], data).expect("n x n")
}

impl ChannelMix {
    pub fn new<R: Rng + ?Sized>(channels: usize, init: MixInit, rng: &mut R) -> Self {
        let w = match init {
            MixInit::Identity => {
                let mut t = Tensor::zeros(&[channels, channels]);
                for i in 0..channels {
                    t.data_mut()[i * channels + i] = 1.0;
                }
                t
            }
            MixInit::Orthogonal => random_orthogonal(channels, rng),
        };
        Self::with_weight(w)
    }

    pub fn with_weight(w: Tensor) -> Self {
        Self {
            weight: Parameter::new(w),
        }
    }

    pub fn channels(&self) -> usize {
        self.weight.shape()[0]
    }

    fn apply<'t>(x: Var<'t>, w: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let c = s[1];
        if s.len() == 2 {
            x.matmul(w.transpose()?)
        } else {
            x.conv2d(w.reshape(&[c, c, 1, 1])?, None)
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, mode: Bind) -> Result<LayerOut<'t>> {
        check_channels("channel mix", &x, self.channels())?;
        let w = bind(tape, &self.weight, mode);
        let logdet = w.logabsdet()?.scale(spatial_or_one(&x.shape()) as f64);
        Ok((Self::apply(x, w)?, Some(logdet)))
    }

    pub fn inverse<'t>(&self, tape: &'t Tape, y: Var<'t>, _mode: Bind) -> Result<Var<'t>> {
        check_channels("channel mix", &y, self.channels())?;
        let c = self.channels();
        let inv = matrix_inverse(c, self.weight.value.data())?;
        Self::apply(y, tape.constant(Tensor::new(&[c, c], inv)?))
    }
}

/// Space-to-channel 2x2 squeeze:
/// `out[c*4 + dy*2 + dx][i][j] = in[c][2i + dy][2j + dx]`.
pub fn squeeze<'t>(x: Var<'t>) -> Result<Var<'t>> {
    let s = x.shape();
    if s.len() != 4 || s[2] % 2 != 0 || s[3] % 2 != 0 {
        return Err(Error::Config(format!("squeeze needs even spatial extents, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1], s[2] / 2, s[3] / 2);
    x.reshape(&[n, c, h, 2, w, 2])?
        .permute(&[0, 1, 3, 5, 2, 4])?
        .reshape(&[n, 4 * c, h, w])
}

pub fn unsqueeze<'t>(y: Var<'t>) -> Result<Var<'t>> {
    let s = y.shape();
    if s.len() != 4 || s[1] % 4 != 0 {
        return Err(Error::Config(format!("unsqueeze needs a multiple of 4 channels, got {s:?}")));
    }
    let (n, c, h, w) = (s[0], s[1] / 4, s[2], s[3]);
    y.reshape(&[n, c, 2, 2, h, w])?
        .permute(&[0, 1, 4, 2, 5, 3])?
        .reshape(&[n, c, 2 * h, 2 * w])
}

/// Orthonormal DCT-II matrix, `D[k][i] = a_k cos(pi (2i + 1) k / 2n)`.
pub fn dct_matrix(n: usize) -> Tensor {
    let mut d = vec![0.0; n * n];
    for k in 0..n {
        let a = if k == 0 { (1.0 / n as f64).sqrt() } else { (2.0 / n as f64).sqrt() };
        for i in 0..n {
            d[k * n + i] = a * (std::f64::consts::PI * (2 * i + 1) as f64 * k as f64 / (2 * n) as f64).cos();
        }
    }
    Tensor::new(&[n, n], d).expect("n x n")
}

/// JPEG zig-zag traversal of an n x n grid, as raster indices `row * n + col`.
pub fn zigzag(n: usize) -> Vec<usize> {
    let mut order = Vec::with_capacity(n * n);
    for s in 0..2 * n - 1 {
        let lo = s.saturating_sub(n - 1);
        let hi = s.min(n - 1);
        let rows: Vec<usize> = if s % 2 == 0 { (lo..=hi).rev().collect() } else { (lo..=hi).collect() };
        order.extend(rows.into_iter().map(|i| i * n + (s - i)));
    }
    order
}

/// Orthonormal 2D DCT-II of every (square) channel, flattened frequency-major:
/// output index `k * C + c` holds the k-th zig-zag coefficient of channel c.
/// The first C outputs are therefore the DC terms of all channels.
#[derive(Clone, Debug)]
pub struct DctReadout {
    pub channels: usize,
    pub side: usize,
}

impl DctReadout {
    pub fn new(channels: usize, side: usize) -> Self {
        Self { channels, side }
    }

    fn transform<'t>(tape: &'t Tape, x: Var<'t>, right: &Tensor) -> Result<Var<'t>> {
        // rows times `right`, transpose, again, transpose back
        let s = x.shape();
        let (m, n) = (s[0] * s[1], s[2]);
        let r = tape.constant(right.clone());
        let a = x.reshape(&[m * n, n])?.matmul(r)?;
        let a = a.reshape(&[m, n, n])?.transpose()?.reshape(&[m * n, n])?.matmul(r)?;
        a.reshape(&[m, n, n])?.transpose()?.reshape(&s)
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>) -> Result<Var<'t>> {
        let s = x.shape();
        let (c, n) = (self.channels, self.side);
        if s.len() != 4 || s[1] != c || s[2] != n || s[3] != n {
            return Err(Error::shape("dct readout", &s, &[0, c, n, n]));
        }
        let d = dct_matrix(n);
        let dt = tape.constant(d).transpose()?.tensor();
        let coeffs = Self::transform(tape, x, &dt)?;
        coeffs
            .reshape(&[s[0], c, n * n])?
            .permute(&[0, 2, 1])?
            .index_select(1, &zigzag(n))?
            .reshape(&[s[0], n * n * c])
    }

    pub fn inverse<'t>(&self, tape: &'t Tape, z: Var<'t>) -> Result<Var<'t>> {
        let (c, n) = (self.channels, self.side);
        let s = z.shape();
        if s.len() != 2 || s[1] != c * n * n {
            return Err(Error::shape("dct readout inverse", &s, &[0, c * n * n]));
        }
        let zz = zigzag(n);
        let mut inv = vec![0; n * n];
        for (pos, &r) in zz.iter().enumerate() {
            inv[r] = pos;
        }
        let coeffs = z
            .reshape(&[s[0], n * n, c])?
            .index_select(1, &inv)?
            .permute(&[0, 2, 1])?
            .reshape(&[s[0], c, n, n])?;
        Self::transform(tape, coeffs, &dct_matrix(n))
    }
}

/// A layer of a fully invertible network.
#[derive(Clone, Debug)]
pub enum BijectiveLayer {
    ActNorm(ActNorm),
    Coupling(Coupling),
    ChannelMix(ChannelMix),
    Squeeze,
    DctReadout(DctReadout),
}

impl BijectiveLayer {
    pub fn kind(&self) -> &'static str {
        match self {
            BijectiveLayer::ActNorm(_) => "actnorm",
            BijectiveLayer::Coupling(c) if c.affine => "affine-coupling",
            BijectiveLayer::Coupling(_) => "additive-coupling",
            BijectiveLayer::ChannelMix(_) => "channel-mix-1x1",
            BijectiveLayer::Squeeze => "squeeze",
            BijectiveLayer::DctReadout(_) => "dct-readout",
        }
    }

    pub fn forward<'t>(&self, tape: &'t Tape, x: Var<'t>, mode: Bind) -> Result<LayerOut<'t>> {
        match self {
            BijectiveLayer::ActNorm(l) => l.forward(tape, x, mode),
            BijectiveLayer::Coupling(l) => l.forward(tape, x, mode),
            BijectiveLayer::ChannelMix(l) => l.forward(tape, x, mode),
            BijectiveLayer::Squeeze => Ok((squeeze(x)?, None)),
            BijectiveLayer::DctReadout(l) => Ok((l.forward(tape, x)?, None)),
        }
    }

    pub fn inverse<'t>(&self, tape: &'t Tape, y: Var<'t>, mode: Bind) -> Result<Var<'t>> {
        match self {
            BijectiveLayer::ActNorm(l) => l.inverse(tape, y, mode),
            BijectiveLayer::Coupling(l) => l.inverse(tape, y, mode),
            BijectiveLayer::ChannelMix(l) => l.inverse(tape, y, mode),
            BijectiveLayer::Squeeze => unsqueeze(y),
            BijectiveLayer::DctReadout(l) => l.inverse(tape, y),
        }
    }

    /// Plain-tensor forward with frozen parameters.
    pub fn apply(&self, x: &Tensor) -> Result<(Tensor, f64)> {
        let tape = Tape::new();
        let (y, ld) = self.forward(&tape, tape.constant(x.clone()), Bind::Frozen)?;
        Ok((y.tensor(), ld.map_or(0.0, |l| l.value().item())))
    }

    /// Plain-tensor inverse.
    pub fn invert(&self, y: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        Ok(self.inverse(&tape, tape.constant(y.clone()), Bind::Frozen)?.tensor())
    }

    pub fn named_params(&self) -> Vec<(String, &Parameter)> {
        match self {
            BijectiveLayer::ActNorm(l) => vec![("scale".into(), &l.scale), ("bias".into(), &l.bias)],
            BijectiveLayer::Coupling(l) => l.subnet.named_params(),
            BijectiveLayer::ChannelMix(l) => vec![("weight".into(), &l.weight)],
            BijectiveLayer::Squeeze | BijectiveLayer::DctReadout(_) => vec![],
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Parameter)> {
        match self {
            BijectiveLayer::ActNorm(l) => vec![("scale".into(), &mut l.scale), ("bias".into(), &mut l.bias)],
            BijectiveLayer::Coupling(l) => l.subnet.named_params_mut(),
            BijectiveLayer::ChannelMix(l) => vec![("weight".into(), &mut l.weight)],
            BijectiveLayer::Squeeze | BijectiveLayer::DctReadout(_) => vec![],
        }
    }
}
