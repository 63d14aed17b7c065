//! Define-by-run tape. Every operation appends a node whose inputs already
//! exist on the tape, so node order is a topological order and the backward
//! pass is a single reverse sweep.

use crate::conv::{ConvGeom, TransposedGeom};
use crate::{Error, Result, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Activation(Activation, Var),
    SmoothAbs(Var),
    Square(Var),
    Scale(Var, f64),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: TransposedGeom,
    },
    ChannelAffine {
        input: Var,
        scale: Var,
        shift: Var,
    },
    Concat(Vec<Var>),
    GlobalAvgPool(Var),
    BroadcastSpatial(Var),
    Sum(Var),
    WeightedSum {
        input: Var,
        weights: Vec<f64>,
    },
    /// Per-sample divisor `sqrt(mean(x²) + eps²)`.
    RmsNormalize {
        input: Var,
        divisors: Vec<f64>,
    },
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Binary(BinaryOp::Add, ..) => "add",
            Op::Binary(BinaryOp::Sub, ..) => "sub",
            Op::Binary(BinaryOp::Mul, ..) => "mul",
            Op::Activation(Activation::Relu, _) => "relu",
            Op::Activation(Activation::Sigmoid, _) => "sigmoid",
            Op::SmoothAbs(_) => "smooth_abs",
            Op::Square(_) => "square",
            Op::Scale(..) => "scale",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::ChannelAffine { .. } => "channel_affine",
            Op::Concat(_) => "concat",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::BroadcastSpatial(_) => "broadcast_spatial",
            Op::Sum(_) => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::RmsNormalize { .. } => "rms_normalize",
        }
    }
}

pub(crate) struct Node {
    pub value: Tensor,
    pub requires_grad: bool,
    pub op: Op,
}

/// Recorded computation. Build a fresh tape for every forward pass.
#[derive(Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

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

    /// A leaf that receives a gradient on [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
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

    /// Accumulated gradient, if the node was reached by a backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        self.grad(v)
            .map(|g| Tensor::from_parts(self.value(v).shape().to_vec(), g.to_vec()))
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = self
            .op_inputs(&op)
            .iter()
            .any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Ok(Var(self.nodes.len() - 1))
    }

    fn op_inputs(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Binary(_, a, b) => vec![*a, *b],
            Op::Activation(_, x)
            | Op::SmoothAbs(x)
            | Op::Square(x)
            | Op::Scale(x, _)
            | Op::GlobalAvgPool(x)
            | Op::BroadcastSpatial(x)
            | Op::Sum(x)
            | Op::WeightedSum { input: x, .. }
            | Op::RmsNormalize { input: x, .. } => vec![*x],
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            }
            | Op::ConvTranspose2d {
                input,
                weight,
                bias,
                ..
            } => {
                let mut v = vec![*input, *weight];
                v.extend(bias);
                v
            }
            Op::ChannelAffine {
                input,
                scale,
                shift,
            } => vec![*input, *scale, *shift],
            Op::Concat(parts) => parts.clone(),
        }
    }

    fn accumulate(&mut self, v: Var, g: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    /// Reverse sweep from a one-element `loss`. Gradients accumulate into any
    /// existing values, so call this once per tape.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, &[1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.node_backward(i, &gout)?;
            self.grads[i] = Some(gout);
            for (v, g) in contributions {
                self.accumulate(v, &g);
            }
        }
        Ok(())
    }

    fn node_backward(&self, i: usize, gout: &[f64]) -> Result<Vec<(Var, Vec<f64>)>> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Binary(kind, a, b) => {
                let (a, b) = (*a, *b);
                match kind {
                    BinaryOp::Add => {
                        out.push((a, gout.to_vec()));
                        out.push((b, gout.to_vec()));
                    }
                    BinaryOp::Sub => {
                        out.push((a, gout.to_vec()));
                        if needs(b) {
                            out.push((b, gout.iter().map(|g| -g).collect()));
                        }
                    }
                    BinaryOp::Mul => {
                        if needs(a) {
                            out.push((a, gout.iter().zip(val(b)).map(|(g, y)| g * y).collect()));
                        }
                        if needs(b) {
                            out.push((b, gout.iter().zip(val(a)).map(|(g, x)| g * x).collect()));
                        }
                    }
                }
            }
            Op::Activation(kind, x) => {
                let g = match kind {
                    Activation::Relu => gout
                        .iter()
                        .zip(val(*x))
                        .map(|(g, &xv)| if xv > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => gout
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, &s)| g * s * (1.0 - s))
                        .collect(),
                };
                out.push((*x, g));
            }
            Op::SmoothAbs(x) => {
                let g = gout
                    .iter()
                    .zip(val(*x))
                    .zip(node.value.data())
                    .map(|((g, &xv), &yv)| if yv > 0.0 { g * xv / yv } else { 0.0 })
                    .collect();
                out.push((*x, g));
            }
            Op::Square(x) => {
                out.push((
                    *x,
                    gout.iter()
                        .zip(val(*x))
                        .map(|(g, xv)| 2.0 * g * xv)
                        .collect(),
                ));
            }
            Op::Scale(x, c) => out.push((*x, gout.iter().map(|g| g * c).collect())),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let xp = crate::conv::pad_input(val(*input), geom);
                let (gxp, gw, gb) = crate::conv::conv2d_backward(&xp, val(*weight), gout, geom);
                if needs(*input) {
                    out.push((*input, crate::conv::unpad_grad(&gxp, geom)));
                }
                out.push((*weight, gw));
                if let Some(b) = bias {
                    out.push((*b, gb));
                }
            }
            Op::ConvTranspose2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (gx, gw, gb) =
                    crate::conv::conv_transpose2d_backward(val(*input), val(*weight), gout, geom);
                out.push((*input, gx));
                out.push((*weight, gw));
                if let Some(b) = bias {
                    out.push((*b, gb));
                }
            }
            Op::ChannelAffine {
                input,
                scale,
                shift,
            } => {
                let (n, c, h, w) = self.nodes[input.0].value.dims4()?;
                let plane = h * w;
                let x = val(*input);
                let sc = val(*scale);
                let mut gx = vec![0.0; x.len()];
                let mut gs = vec![0.0; c];
                let mut gt = vec![0.0; c];
                for ni in 0..n {
                    for ci in 0..c {
                        let off = (ni * c + ci) * plane;
                        for j in off..off + plane {
                            gx[j] = gout[j] * sc[ci];
                            gs[ci] += gout[j] * x[j];
                            gt[ci] += gout[j];
                        }
                    }
                }
                out.push((*input, gx));
                out.push((*scale, gs));
                out.push((*shift, gt));
            }
            Op::Concat(parts) => {
                let (n, c_total, h, w) = node.value.dims4()?;
                let plane = h * w;
                let mut c_off = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.dims4()?.1;
                    if needs(p) {
                        let mut g = Vec::with_capacity(n * c * plane);
                        for ni in 0..n {
                            g.extend_from_slice(
                                &gout[(ni * c_total + c_off) * plane..][..c * plane],
                            );
                        }
                        out.push((p, g));
                    }
                    c_off += c;
                }
            }
            Op::GlobalAvgPool(x) => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4()?;
                let plane = h * w;
                let mut g = vec![0.0; n * c * plane];
                for (j, gv) in gout.iter().enumerate() {
                    g[j * plane..][..plane].fill(gv / plane as f64);
                }
                out.push((*x, g));
            }
            Op::BroadcastSpatial(x) => {
                let (_, _, h, w) = node.value.dims4()?;
                let plane = h * w;
                let g = gout.chunks(plane).map(|c| c.iter().sum()).collect();
                out.push((*x, g));
            }
            Op::Sum(x) => {
                out.push((*x, vec![gout[0]; self.nodes[x.0].value.numel()]));
            }
            Op::WeightedSum { input, weights } => {
                out.push((*input, weights.iter().map(|w| w * gout[0]).collect()));
            }
            Op::RmsNormalize { input, divisors } => {
                // y = x / s with s² = mean(x²) + eps²: dx = (g - y·mean(g·y)) / s.
                let m = gout.len() / divisors.len();
                let y = node.value.data();
                let mut gx = Vec::with_capacity(gout.len());
                for (ni, &s) in divisors.iter().enumerate() {
                    let (g, ys) = (&gout[ni * m..][..m], &y[ni * m..][..m]);
                    let proj = g.iter().zip(ys).map(|(a, b)| a * b).sum::<f64>() / m as f64;
                    gx.extend(g.iter().zip(ys).map(|(gv, yv)| (gv - yv * proj) / s));
                }
                out.push((*input, gx));
            }
        }
        Ok(out)
    }
}
