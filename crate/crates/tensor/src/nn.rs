//! Composite layers: convolutions, the four normalization variants, residual
//! blocks, and the downsampling + hourglass backbone.
//!
//! Layers only hold configuration and parameter names. Weights live in a
//! [`ParameterSet`] and are bound into a [`Graph`] on every forward pass.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::element::Element;
use crate::error::{Result, TensorError};
use crate::graph::{Graph, Var};
use crate::optim::ParameterSet;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    Bn,
    In,
    Gn,
    Ln,
}

impl NormKind {
    pub const ALL: [NormKind; 4] = [NormKind::Bn, NormKind::In, NormKind::Gn, NormKind::Ln];

    pub fn as_str(self) -> &'static str {
        match self {
            NormKind::Bn => "bn",
            NormKind::In => "in",
            NormKind::Gn => "gn",
            NormKind::Ln => "ln",
        }
    }
}

impl std::str::FromStr for NormKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "bn" => Ok(NormKind::Bn),
            "in" => Ok(NormKind::In),
            "gn" => Ok(NormKind::Gn),
            "ln" => Ok(NormKind::Ln),
            other => Err(format!("unknown norm `{other}` (expected bn, in, gn or ln)")),
        }
    }
}

impl std::fmt::Display for NormKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormSpec {
    pub kind: NormKind,
    /// Group count for GN; clamped to the channel count of narrow layers.
    pub groups: usize,
    pub eps: f64,
    pub momentum: f64,
}

impl NormSpec {
    pub fn new(kind: NormKind) -> Self {
        Self { kind, groups: 32, eps: 1e-5, momentum: 0.1 }
    }

    /// Groups used on a layer with `channels` channels.
    pub fn groups_for(&self, channels: usize) -> Result<usize> {
        let g = match self.kind {
            NormKind::Bn => return Ok(1),
            NormKind::In => channels,
            NormKind::Ln => 1,
            NormKind::Gn => self.groups.min(channels),
        };
        if g == 0 || channels % g != 0 {
            return Err(TensorError::Invalid {
                op: "norm",
                msg: format!("{g} groups do not divide {channels} channels"),
            });
        }
        Ok(g)
    }
}

fn kaiming<T: Element, R: Rng + ?Sized>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor<T> {
    Tensor::normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub bias: bool,
}

impl Conv2d {
    /// Registers `{name}.weight` (Kaiming normal) and optionally `{name}.bias` (zeros).
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParameterSet<T>,
        rng: &mut R,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let w = kaiming(&[out_channels, in_channels, kernel, kernel], fan_in, rng);
        params.add(&format!("{name}.weight"), w, true)?;
        if bias {
            params.add(&format!("{name}.bias"), Tensor::zeros(&[out_channels]), true)?;
        }
        Ok(Self {
            name: name.to_string(),
            in_channels,
            out_channels,
            kernel,
            stride,
            pad: kernel / 2,
            bias,
        })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &ParameterSet<T>, x: Var) -> Result<Var> {
        let w = g.param(p, &format!("{}.weight", self.name))?;
        let b = if self.bias { Some(g.param(p, &format!("{}.bias", self.name))?) } else { None };
        g.conv2d(x, w, b, self.stride, self.pad)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    /// Registers `{name}.weight` and `{name}.bias`; `zero_init` zeroes both.
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParameterSet<T>,
        rng: &mut R,
        name: &str,
        in_features: usize,
        out_features: usize,
        zero_init: bool,
    ) -> Result<Self> {
        let w = if zero_init {
            Tensor::zeros(&[out_features, in_features])
        } else {
            Tensor::uniform(&[out_features, in_features], 1.0 / (in_features as f64).sqrt(), rng)
        };
        params.add(&format!("{name}.weight"), w, true)?;
        params.add(&format!("{name}.bias"), Tensor::zeros(&[out_features]), true)?;
        Ok(Self { name: name.to_string(), in_features, out_features })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &ParameterSet<T>, x: Var) -> Result<Var> {
        let w = g.param(p, &format!("{}.weight", self.name))?;
        let b = g.param(p, &format!("{}.bias", self.name))?;
        g.linear(x, w, Some(b))
    }
}

/// Normalization layer with per-channel affine parameters.
///
/// BN also owns `running_mean` / `running_var` buffers. Train mode normalizes
/// with batch statistics and queues the momentum update on the graph; eval
/// mode uses the running statistics.
#[derive(Debug, Clone)]
pub struct Norm {
    pub name: String,
    pub spec: NormSpec,
    pub channels: usize,
    groups: usize,
}

impl Norm {
    pub fn new<T: Element>(params: &mut ParameterSet<T>, name: &str, spec: NormSpec, channels: usize) -> Result<Self> {
        let groups = spec.groups_for(channels)?;
        params.add(&format!("{name}.gamma"), Tensor::ones(&[channels]), true)?;
        params.add(&format!("{name}.beta"), Tensor::zeros(&[channels]), true)?;
        if spec.kind == NormKind::Bn {
            params.add(&format!("{name}.running_mean"), Tensor::zeros(&[channels]), false)?;
            params.add(&format!("{name}.running_var"), Tensor::ones(&[channels]), false)?;
        }
        Ok(Self { name: name.to_string(), spec, channels, groups })
    }

    /// Normalized input before the affine transform.
    pub fn normalize<T: Element>(&self, g: &mut Graph<T>, p: &ParameterSet<T>, x: Var, mode: Mode) -> Result<Var> {
        if g.shape(x).get(1) != Some(&self.channels) {
            return Err(TensorError::Invalid {
                op: "norm",
                msg: format!("{} expects {} channels, got {:?}", self.name, self.channels, g.shape(x)),
            });
        }
        match (self.spec.kind, mode) {
            (NormKind::Bn, Mode::Train) => {
                let (y, stats) = g.batch_norm(x, self.spec.eps)?;
                let m = self.spec.momentum;
                let unbias = if stats.count > 1 { stats.count as f64 / (stats.count - 1) as f64 } else { 1.0 };
                let rm = p.value(&format!("{}.running_mean", self.name))?;
                let rv = p.value(&format!("{}.running_var", self.name))?;
                let new_mean: Vec<T> = rm
                    .data()
                    .iter()
                    .zip(&stats.mean)
                    .map(|(&r, &b)| T::from_f64_lossy((1.0 - m) * r.as_f64() + m * b.as_f64()))
                    .collect();
                let new_var: Vec<T> = rv
                    .data()
                    .iter()
                    .zip(&stats.var)
                    .map(|(&r, &b)| T::from_f64_lossy((1.0 - m) * r.as_f64() + m * b.as_f64() * unbias))
                    .collect();
                let c = self.channels;
                g.update_buffer(&format!("{}.running_mean", self.name), Tensor::from_vec(&[c], new_mean)?);
                g.update_buffer(&format!("{}.running_var", self.name), Tensor::from_vec(&[c], new_var)?);
                Ok(y)
            }
            (NormKind::Bn, Mode::Eval) => {
                let rm = p.value(&format!("{}.running_mean", self.name))?;
                let rv = p.value(&format!("{}.running_var", self.name))?;
                let scale: Vec<T> =
                    rv.data().iter().map(|&v| T::from_f64_lossy(1.0 / (v.as_f64() + self.spec.eps).sqrt())).collect();
                let shift: Vec<T> = rm.data().iter().zip(&scale).map(|(&m, &s)| -m * s).collect();
                let c = self.channels;
                let s = g.constant(Tensor::from_vec(&[c], scale)?);
                let b = g.constant(Tensor::from_vec(&[c], shift)?);
                g.channel_affine(x, s, b)
            }
            _ => g.group_norm(x, self.groups, self.spec.eps),
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &ParameterSet<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.normalize(g, p, x, mode)?;
        let gamma = g.param(p, &format!("{}.gamma", self.name))?;
        let beta = g.param(p, &format!("{}.beta", self.name))?;
        g.channel_affine(y, gamma, beta)
    }
}

/// conv -> norm -> relu
#[derive(Debug, Clone)]
pub struct ConvNormAct {
    pub conv: Conv2d,
    pub norm: Norm,
}

impl ConvNormAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParameterSet<T>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        norm: NormSpec,
    ) -> Result<Self> {
        let conv = Conv2d::new(params, rng, &format!("{name}.conv"), in_c, out_c, kernel, stride, false)?;
        let norm = Norm::new(params, &format!("{name}.norm"), norm, out_c)?;
        Ok(Self { conv, norm })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &ParameterSet<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.conv.forward(g, p, x)?;
        let y = self.norm.forward(g, p, y, mode)?;
        Ok(g.relu(y))
    }
}

/// Basic two-convolution residual block with a projection shortcut when the
/// shape changes.
#[derive(Debug, Clone)]
pub struct ResidualBlock {
    first: ConvNormAct,
    conv2: Conv2d,
    norm2: Norm,
    shortcut: Option<(Conv2d, Norm)>,
}

impl ResidualBlock {
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParameterSet<T>,
        rng: &mut R,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        norm: NormSpec,
    ) -> Result<Self> {
        let first = ConvNormAct::new(params, rng, &format!("{name}.a"), in_c, out_c, 3, stride, norm)?;
        let conv2 = Conv2d::new(params, rng, &format!("{name}.b.conv"), out_c, out_c, 3, 1, false)?;
        let norm2 = Norm::new(params, &format!("{name}.b.norm"), norm, out_c)?;
        let shortcut = if stride != 1 || in_c != out_c {
            let c = Conv2d::new(params, rng, &format!("{name}.skip.conv"), in_c, out_c, 1, stride, false)?;
            let n = Norm::new(params, &format!("{name}.skip.norm"), norm, out_c)?;
            Some((c, n))
        } else {
            None
        };
        Ok(Self { first, conv2, norm2, shortcut })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &ParameterSet<T>, x: Var, mode: Mode) -> Result<Var> {
        let y = self.first.forward(g, p, x, mode)?;
        let y = self.conv2.forward(g, p, y)?;
        let y = self.norm2.forward(g, p, y, mode)?;
        let skip = match &self.shortcut {
            Some((c, n)) => {
                let s = c.forward(g, p, x)?;
                n.forward(g, p, s, mode)?
            }
            None => x,
        };
        let sum = g.add(y, skip)?;
        Ok(g.relu(sum))
    }
}

/// Recursive encoder-decoder with a skip branch at every level. Each level
/// halves resolution with a strided block and restores it with nearest
/// upsampling to the exact skip size, so odd sizes are fine.
#[derive(Debug, Clone)]
pub struct Hourglass {
    skip: ResidualBlock,
    down: ResidualBlock,
    inner: Box<HourglassInner>,
    up: ResidualBlock,
}

#[derive(Debug, Clone)]
enum HourglassInner {
    Level(Hourglass),
    Bottom(ResidualBlock),
}

impl Hourglass {
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParameterSet<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        depth: usize,
        norm: NormSpec,
    ) -> Result<Self> {
        if depth == 0 {
            return Err(TensorError::Invalid { op: "hourglass", msg: "depth must be at least 1".into() });
        }
        let c = channels;
        let skip = ResidualBlock::new(params, rng, &format!("{name}.skip"), c, c, 1, norm)?;
        let down = ResidualBlock::new(params, rng, &format!("{name}.down"), c, c, 2, norm)?;
        let inner = if depth > 1 {
            HourglassInner::Level(Hourglass::new(params, rng, &format!("{name}.inner"), c, depth - 1, norm)?)
        } else {
            HourglassInner::Bottom(ResidualBlock::new(params, rng, &format!("{name}.bottom"), c, c, 1, norm)?)
        };
        let up = ResidualBlock::new(params, rng, &format!("{name}.up"), c, c, 1, norm)?;
        Ok(Self { skip, down, inner: Box::new(inner), up })
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &ParameterSet<T>, x: Var, mode: Mode) -> Result<Var> {
        let (h, w) = (g.shape(x)[2], g.shape(x)[3]);
        let skip = self.skip.forward(g, p, x, mode)?;
        let low = self.down.forward(g, p, x, mode)?;
        let low = match self.inner.as_ref() {
            HourglassInner::Level(hg) => hg.forward(g, p, low, mode)?,
            HourglassInner::Bottom(b) => b.forward(g, p, low, mode)?,
        };
        let low = self.up.forward(g, p, low, mode)?;
        let up = g.upsample_nearest(low, h, w)?;
        g.add(skip, up)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub stem_channels: usize,
    /// At least two; the first two downsample by 2 each.
    pub residual_blocks: usize,
    /// `0` disables the hourglass.
    pub hourglass_depth: usize,
    pub out_channels: usize,
}

impl BackboneSpec {
    pub const DOWNSAMPLE: usize = 4;
}

/// Stem convolution, residual blocks downsampling by 4, optional hourglass.
#[derive(Debug, Clone)]
pub struct Backbone {
    pub spec: BackboneSpec,
    pub input_hw: (usize, usize),
    stem: ConvNormAct,
    blocks: Vec<ResidualBlock>,
    hourglass: Option<Hourglass>,
}

impl Backbone {
    pub fn new<T: Element, R: Rng + ?Sized>(
        params: &mut ParameterSet<T>,
        rng: &mut R,
        name: &str,
        spec: BackboneSpec,
        norm: NormSpec,
        input_hw: (usize, usize),
    ) -> Result<Self> {
        let (h, w) = input_hw;
        if h == 0 || w == 0 || h % BackboneSpec::DOWNSAMPLE != 0 || w % BackboneSpec::DOWNSAMPLE != 0 {
            return Err(TensorError::Invalid {
                op: "backbone",
                msg: format!("input {h}x{w} is not divisible by {}", BackboneSpec::DOWNSAMPLE),
            });
        }
        if spec.residual_blocks < 2 {
            return Err(TensorError::Invalid { op: "backbone", msg: "need at least two residual blocks".into() });
        }
        let stem = ConvNormAct::new(params, rng, &format!("{name}.stem"), spec.in_channels, spec.stem_channels, 3, 1, norm)?;
        let mut blocks = Vec::new();
        let mut c = spec.stem_channels;
        for i in 0..spec.residual_blocks {
            let stride = if i < 2 { 2 } else { 1 };
            blocks.push(ResidualBlock::new(params, rng, &format!("{name}.res{i}"), c, spec.out_channels, stride, norm)?);
            c = spec.out_channels;
        }
        let hourglass = if spec.hourglass_depth > 0 {
            Some(Hourglass::new(params, rng, &format!("{name}.hg"), c, spec.hourglass_depth, norm)?)
        } else {
            None
        };
        Ok(Self { spec, input_hw, stem, blocks, hourglass })
    }

    pub fn output_hw(&self) -> (usize, usize) {
        (self.input_hw.0 / BackboneSpec::DOWNSAMPLE, self.input_hw.1 / BackboneSpec::DOWNSAMPLE)
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<T>, p: &ParameterSet<T>, x: Var, mode: Mode) -> Result<Var> {
        let s = g.shape(x);
        if s.len() != 4 || s[1] != self.spec.in_channels || (s[2], s[3]) != self.input_hw {
            return Err(TensorError::Invalid {
                op: "backbone",
                msg: format!(
                    "expected (N, {}, {}, {}), got {s:?}",
                    self.spec.in_channels, self.input_hw.0, self.input_hw.1
                ),
            });
        }
        let mut y = self.stem.forward(g, p, x, mode)?;
        for b in &self.blocks {
            y = b.forward(g, p, y, mode)?;
        }
        if let Some(hg) = &self.hourglass {
            y = hg.forward(g, p, y, mode)?;
        }
        Ok(y)
    }
}
