//! Parameter storage, layers, and the three pipeline networks.

pub mod aps;
pub mod checkpoint;
pub mod fusion;
pub mod multitask;

use std::ops::Index;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Index of a tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(usize);

impl ParamId {
    /// Position in [`ParamSet`] order, which is also the order of [`Bound::grads`].
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        self.names.push(name.into());
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Zeros every parameter in place.
    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().fill(0.0);
        }
    }

    /// Places every parameter on `tape`, as trainable leaves or as constants.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Contract("parameter names differ".into()));
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            if a.shape() != b.shape() {
                return Err(Error::dim("load_params", format!("{:?} vs {:?}", a.shape(), b.shape())));
            }
            *a = b.clone();
        }
        Ok(())
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients for every parameter, in [`ParamSet`] order.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.vars.iter().map(|&v| tape.grad(v)).collect()
    }
}

impl Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

/// Fan-in scaled normal initialization, `std = sqrt(2 / fan_in)`.
pub fn he_normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let fan_in: usize = shape[1..].iter().product();
    Tensor::normal(shape, (2.0 / fan_in as f64).sqrt(), rng)
}

/// Square convolution with bias.
#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        ps: &mut ParamSet,
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = ps.add(format!("{name}.weight"), he_normal(&[out_c, in_c, k, k], rng));
        let bias = ps.add(format!("{name}.bias"), Tensor::zeros(&[out_c]));
        Conv {
            weight,
            bias,
            stride,
            padding,
        }
    }

    /// 3x3, stride 1, same padding.
    pub fn same3(ps: &mut ParamSet, name: &str, in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        Self::new(ps, name, in_c, out_c, 3, 1, 1, rng)
    }

    /// 1x1 projection.
    pub fn point(ps: &mut ParamSet, name: &str, in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        Self::new(ps, name, in_c, out_c, 1, 1, 0, rng)
    }

    /// 2x2 stride-2 downsampling.
    pub fn down2(ps: &mut ParamSet, name: &str, in_c: usize, out_c: usize, rng: &mut impl Rng) -> Self {
        Self::new(ps, name, in_c, out_c, 2, 2, 0, rng)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        tape.conv2d(x, p[self.weight], p[self.bias], self.stride, self.padding)
    }

    pub fn out_channels(&self, ps: &ParamSet) -> usize {
        ps.get(self.weight).shape()[0]
    }
}

/// Five-stage downsampling encoder: each stage is a 2x2 stride-2 conv then a 3x3 conv, both with relu.
#[derive(Debug, Clone)]
pub struct Encoder {
    stages: Vec<(Conv, Conv)>,
}

pub const LEVELS: usize = 5;

impl Encoder {
    pub fn new(ps: &mut ParamSet, prefix: &str, in_c: usize, channels: &[usize; LEVELS], rng: &mut impl Rng) -> Self {
        let mut prev = in_c;
        let stages = channels
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let down = Conv::down2(ps, &format!("{prefix}{}.down", i + 1), prev, c, rng);
                let conv = Conv::same3(ps, &format!("{prefix}{}.conv", i + 1), c, c, rng);
                prev = c;
                (down, conv)
            })
            .collect();
        Encoder { stages }
    }

    /// Returns the five level features, finest first.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Vec<Var>> {
        let mut feats = Vec::with_capacity(LEVELS);
        let mut h = x;
        for (down, conv) in &self.stages {
            let d = down.forward(tape, p, h)?;
            let d = tape.relu(d);
            let c = conv.forward(tape, p, d)?;
            h = tape.relu(c);
            feats.push(h);
        }
        Ok(feats)
    }
}

/// Upsample `x` by exactly two in each spatial dimension.
pub fn up2(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    tape.upsample(x, s[2] * 2, s[3] * 2)
}

/// Checks an image batch is rank-4 with the expected channel count and a spatial size divisible by 32.
pub fn check_image(t: &Tensor, channels: usize, what: &str) -> Result<(usize, usize, usize)> {
    let (b, c, h, w) = t.dims4()?;
    if c != channels {
        return Err(Error::dim("forward", format!("{what} needs {channels} channels, got {c}")));
    }
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::Config(format!("{what} size {h}x{w} must be a positive multiple of 32")));
    }
    Ok((b, h, w))
}
