//! Reverse-mode tape. Nodes are appended in execution order, so the node
//! vector is already topologically sorted and backward is a single reverse sweep.

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Adaptive pooling grid: `bins x bins` cells, or one global cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bins {
    Grid(usize),
    Global,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeom,
    },
    Upsample {
        input: Var,
    },
    Pool {
        input: Var,
        bins: usize,
    },
    Concat {
        inputs: Vec<Var>,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Affine {
        input: Var,
        scale: f64,
    },
    Linear {
        input: Var,
        weight: Var,
        bias: Var,
    },
    Reshape(Var),
    Mean(Var),
    Bce {
        pred: Var,
        target: Tensor,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// A tape is single-threaded; build one per forward pass (or per worker).
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Lower clamp for probabilities fed to [`Tape::bce`].
pub const BCE_EPS: f64 = 1e-7;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a trainable leaf; zero-filled if backward never reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        n.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(n.value.shape()))
    }

    /// Clears all accumulated leaf gradients.
    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite() || !matches!(op, Op::Leaf));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims4(&self, v: Var, op: &'static str) -> Result<(usize, usize, usize, usize)> {
        self.value(v)
            .dims4()
            .map_err(|_| Error::dim(op, format!("expected BCHW input, got {:?}", self.shape(v))))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Result<Var> {
        let (batch, in_c, h, w) = self.dims4(input, "conv2d")?;
        let ws = self.shape(weight).to_vec();
        let [out_c, wi, kh, kw] = ws[..] else {
            return Err(Error::dim("conv2d", format!("weight must be OIKK, got {ws:?}")));
        };
        if wi != in_c {
            return Err(Error::dim(
                "conv2d",
                format!("input has {in_c} channels, weight expects {wi}"),
            ));
        }
        if kh != kw {
            return Err(Error::dim("conv2d", format!("kernel must be square, got {kh}x{kw}")));
        }
        if self.shape(bias) != [out_c] {
            return Err(Error::dim(
                "conv2d",
                format!("bias shape {:?} != [{out_c}]", self.shape(bias)),
            ));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let out_dim = |n: usize| -> Result<usize> {
            let span = (n + 2 * padding)
                .checked_sub(kh)
                .ok_or_else(|| Error::Config(format!("kernel {kh} larger than padded extent {}", n + 2 * padding)))?;
            if span % stride != 0 {
                return Err(Error::Config(format!(
                    "non-integral conv output: ({n} + 2*{padding} - {kh}) / {stride}"
                )));
            }
            Ok(span / stride + 1)
        };
        let geom = ConvGeom {
            batch,
            in_c,
            h,
            w,
            out_c,
            k: kh,
            stride,
            pad: padding,
            out_h: out_dim(h)?,
            out_w: out_dim(w)?,
        };
        let data = kernels::conv2d_forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![batch, out_c, geom.out_h, geom.out_w], data)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            rg,
        ))
    }

    /// Half-pixel-center bilinear resize.
    pub fn upsample(&mut self, input: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let (b, c, h, w) = self.dims4(input, "bilinear_upsample")?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::Config(format!("upsample target {out_h}x{out_w} must be positive")));
        }
        let data = kernels::upsample_forward(b * c, (h, w), (out_h, out_w), self.value(input).data());
        let value = Tensor::new(vec![b, c, out_h, out_w], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Upsample { input }, rg))
    }

    /// Adaptive average pooling to a `bins x bins` grid over every channel.
    pub fn adaptive_pool(&mut self, input: Var, bins: Bins) -> Result<Var> {
        let (b, c, h, w) = self.dims4(input, "adaptive_pool")?;
        let bins = match bins {
            Bins::Global => 1,
            Bins::Grid(n) => n,
        };
        if bins == 0 || bins > h.min(w) {
            return Err(Error::Config(format!("pool bins {bins} exceed spatial extent {h}x{w}")));
        }
        let data = kernels::pool_forward(b * c, (h, w), bins, self.value(input).data());
        let value = Tensor::new(vec![b, c, bins, bins], data)?;
        let rg = self.any_grad(&[input]);
        Ok(self.push(value, Op::Pool { input, bins }, rg))
    }

    /// Single-channel adaptive pooling used by the attention pyramid.
    pub fn pyramid_pool(&mut self, input: Var, bins: Bins) -> Result<Var> {
        let (_, c, _, _) = self.dims4(input, "pyramid_pool")?;
        if c != 1 {
            return Err(Error::dim("pyramid_pool", format!("expected 1 channel, got {c}")));
        }
        self.adaptive_pool(input, bins)
    }

    pub fn concat(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (b, _, h, w) = self.dims4(first, "concat_channels")?;
        let mut total_c = 0;
        for &v in inputs {
            let (bi, ci, hi, wi) = self.dims4(v, "concat_channels")?;
            if (bi, hi, wi) != (b, h, w) {
                return Err(Error::dim(
                    "concat_channels",
                    format!("{:?} vs {:?}", self.shape(v), self.shape(first)),
                ));
            }
            total_c += ci;
        }
        let hw = h * w;
        let mut data = Vec::with_capacity(b * total_c * hw);
        for bi in 0..b {
            for &v in inputs {
                let c = self.shape(v)[1];
                data.extend_from_slice(&self.value(v).data()[bi * c * hw..(bi + 1) * c * hw]);
            }
        }
        let value = Tensor::new(vec![b, total_c, h, w], data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec() }, rg))
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(
                name,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Multiplies `a` by `b` broadcast along channels: `a` is `(B,C,H,W)`, `b` is `(B,1,H,W)`.
    pub fn mul_channel_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, c, h, w) = self.dims4(a, "mul")?;
        let (bb, cb, hb, wb) = self.dims4(b, "mul")?;
        if (ba, h, w) != (bb, hb, wb) || cb != 1 {
            return Err(Error::dim(
                "mul",
                format!("cannot broadcast {:?} over {:?}", self.shape(b), self.shape(a)),
            ));
        }
        if c == 1 {
            return self.mul(a, b);
        }
        // Expand through concat so the backward routes through existing ops.
        let parts = vec![b; c];
        let expanded = self.concat(&parts)?;
        self.mul(a, expanded)
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.any_grad(&[a]);
        self.push(value, op, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.unary(a, f64::abs, Op::Abs(a))
    }

    /// `scale * a + shift`.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        self.unary(a, |x| scale * x + shift, Op::Affine { input: a, scale })
    }

    /// `x (B,N) -> x W^T + b`, `W: (M,N)`, `b: (M)`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(input), self.shape(weight), self.shape(bias));
        let (&[b, n], &[m, wn], &[bm]) = (xs, ws, bs) else {
            return Err(Error::dim("linear", format!("shapes {xs:?} {ws:?} {bs:?}")));
        };
        if wn != n || bm != m {
            return Err(Error::dim("linear", format!("shapes {xs:?} {ws:?} {bs:?}")));
        }
        let data = kernels::linear_forward(
            b,
            n,
            m,
            self.value(input).data(),
            self.value(weight).data(),
            self.value(bias).data(),
        );
        let value = Tensor::new(vec![b, m], data)?;
        let rg = self.any_grad(&[input, weight, bias]);
        Ok(self.push(value, Op::Linear { input, weight, bias }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        let rg = self.any_grad(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Mean over all elements, as a rank-0 tensor.
    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let value = Tensor::scalar(t.sum() / t.len() as f64);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Mean(a), rg)
    }

    /// Mean binary cross-entropy of probabilities `pred` against `target`.
    ///
    /// `pred` is clamped to `[BCE_EPS, 1 - BCE_EPS]`; the gradient is evaluated at
    /// the clamped value and passed straight through the clamp so saturated
    /// outputs still receive a corrective signal.
    pub fn bce(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        if self.shape(pred) != target.shape() {
            return Err(Error::dim(
                "bce_loss",
                format!("pred {:?} vs target {:?}", self.shape(pred), target.shape()),
            ));
        }
        let p = self.value(pred).data();
        let total: f64 = p
            .iter()
            .zip(target.data())
            .map(|(&p, &y)| {
                let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
            })
            .sum();
        let value = Tensor::scalar(total / p.len() as f64);
        let rg = self.any_grad(&[pred]);
        Ok(self.push(
            value,
            Op::Bce {
                pred,
                target: target.clone(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`, accumulating into every trainable leaf.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[i].op {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            for (target, contrib) in self.vjp(i, &g) {
                match &mut adj[target.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for each input that requires grad.
    fn vjp(&self, i: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[i];
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gi, gw, gb) = kernels::conv2d_backward(geom, val(*input), val(*weight), g, rg(*input));
                if let Some(gi) = gi {
                    out.push((*input, gi));
                }
                if rg(*weight) {
                    out.push((*weight, gw));
                }
                if rg(*bias) {
                    out.push((*bias, gb));
                }
            }
            Op::Upsample { input } => {
                if rg(*input) {
                    let s = self.shape(*input);
                    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                    let os = node.value.shape();
                    out.push((*input, kernels::upsample_backward(b * c, (h, w), (os[2], os[3]), g)));
                }
            }
            Op::Pool { input, bins } => {
                if rg(*input) {
                    let s = self.shape(*input);
                    out.push((*input, kernels::pool_backward(s[0] * s[1], (s[2], s[3]), *bins, g)));
                }
            }
            Op::Concat { inputs } => {
                let s = node.value.shape();
                let (b, total_c, hw) = (s[0], s[1], s[2] * s[3]);
                let mut offset = 0;
                for &v in inputs {
                    let c = self.shape(v)[1];
                    if rg(v) {
                        let mut gi = Vec::with_capacity(b * c * hw);
                        for bi in 0..b {
                            gi.extend_from_slice(&g[(bi * total_c + offset) * hw..][..c * hw]);
                        }
                        out.push((v, gi));
                    }
                    offset += c;
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if rg(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if rg(*a) {
                    out.push((*a, g.to_vec()));
                }
                if rg(*b) {
                    out.push((*b, g.iter().map(|x| -x).collect()));
                }
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    out.push((*a, g.iter().zip(val(*b)).map(|(g, y)| g * y).collect()));
                }
                if rg(*b) {
                    out.push((*b, g.iter().zip(val(*a)).map(|(g, x)| g * x).collect()));
                }
            }
            Op::Div(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if rg(*a) {
                    out.push((*a, g.iter().zip(y).map(|(g, y)| g / y).collect()));
                }
                if rg(*b) {
                    out.push((
                        *b,
                        g.iter()
                            .zip(x.iter().zip(y))
                            .map(|(g, (x, y))| -g * x / (y * y))
                            .collect(),
                    ));
                }
            }
            Op::Sigmoid(a) => {
                let s = node.value.data();
                out.push((*a, g.iter().zip(s).map(|(g, s)| g * s * (1.0 - s)).collect()));
            }
            Op::Relu(a) => {
                out.push((
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Abs(a) => {
                out.push((
                    *a,
                    g.iter()
                        .zip(val(*a))
                        .map(|(g, &x)| if x > 0.0 { *g } else if x < 0.0 { -g } else { 0.0 })
                        .collect(),
                ));
            }
            Op::Affine { input, scale } => {
                out.push((*input, g.iter().map(|g| g * scale).collect()));
            }
            Op::Linear { input, weight, bias } => {
                let s = self.shape(*input);
                let (b, n) = (s[0], s[1]);
                let m = self.shape(*weight)[0];
                let (gx, gw, gb) = kernels::linear_backward(b, n, m, val(*input), val(*weight), g);
                if rg(*input) {
                    out.push((*input, gx));
                }
                if rg(*weight) {
                    out.push((*weight, gw));
                }
                if rg(*bias) {
                    out.push((*bias, gb));
                }
            }
            Op::Reshape(a) => out.push((*a, g.to_vec())),
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len();
                out.push((*a, vec![g[0] / n as f64; n]));
            }
            Op::Bce { pred, target } => {
                let p = val(*pred);
                let n = p.len() as f64;
                out.push((
                    *pred,
                    p.iter()
                        .zip(target.data())
                        .map(|(&p, &y)| {
                            let p = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
                            g[0] * (p - y) / (p * (1.0 - p) * n)
                        })
                        .collect(),
                ));
            }
        }
        out.retain(|(v, _)| rg(*v));
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
