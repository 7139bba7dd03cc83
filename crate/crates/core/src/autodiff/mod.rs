//! Reverse-mode automatic differentiation on a dynamic tape.
//!
//! A [`Graph`] records every operation as it is applied. Nodes are appended in
//! evaluation order, so the tape is already topologically sorted and
//! [`Graph::backward`] walks it once in reverse. Gradients are kept only for
//! leaves created with [`Graph::variable`]; intermediate adjoints are dropped
//! as soon as they have been propagated.

pub mod gradcheck;
mod kernels;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use libm::{exp, fabs, log, sqrt, tanh};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::{batch_to_channel_major, channel_to_batch_major, col2im, gemm, im2col, ConvGeom, Mat};

const NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Every differentiable operation the tape knows about.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Conv2d,
    ConvTranspose2d,
    FullyConnected,
    InstanceNorm,
    BatchNorm,
    Relu,
    Sigmoid,
    Tanh,
    Softmax,
    GlobalAvgPool,
    ElementwiseMul,
    ElementwiseAdd,
    Concat,
    L1Distance,
    L2Distance,
    CosineSimilarity,
    Mean,
    // Structural helpers used to wire the networks together.
    AvgPool,
    ElementwiseSub,
    Scale,
    AddScalar,
    Slice,
    Reshape,
    Sum,
    Log,
    Abs,
    Square,
    Normalize,
}

impl OpKind {
    pub const ALL: [OpKind; 28] = [
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::FullyConnected,
        OpKind::InstanceNorm,
        OpKind::BatchNorm,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Softmax,
        OpKind::GlobalAvgPool,
        OpKind::ElementwiseMul,
        OpKind::ElementwiseAdd,
        OpKind::Concat,
        OpKind::L1Distance,
        OpKind::L2Distance,
        OpKind::CosineSimilarity,
        OpKind::Mean,
        OpKind::AvgPool,
        OpKind::ElementwiseSub,
        OpKind::Scale,
        OpKind::AddScalar,
        OpKind::Slice,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::Log,
        OpKind::Abs,
        OpKind::Square,
        OpKind::Normalize,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv-transpose2d",
            OpKind::FullyConnected => "fully-connected",
            OpKind::InstanceNorm => "instance-norm",
            OpKind::BatchNorm => "batch-norm",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Softmax => "softmax",
            OpKind::GlobalAvgPool => "global-avg-pool",
            OpKind::ElementwiseMul => "elementwise-mul",
            OpKind::ElementwiseAdd => "elementwise-add",
            OpKind::Concat => "concat",
            OpKind::L1Distance => "l1-distance",
            OpKind::L2Distance => "l2-distance",
            OpKind::CosineSimilarity => "cosine-similarity",
            OpKind::Mean => "mean",
            OpKind::AvgPool => "avg-pool",
            OpKind::ElementwiseSub => "elementwise-sub",
            OpKind::Scale => "scale",
            OpKind::AddScalar => "add-scalar",
            OpKind::Slice => "slice",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::Log => "log",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Normalize => "normalize",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Unary {
    Relu,
    Sigmoid,
    Tanh,
    Log,
    Abs,
    Square,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Mul,
    Add,
    Sub,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormMode {
    Instance,
    Batch,
    Fixed,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        batch: usize,
    },
    ConvTranspose2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        // Geometry of the adjoint convolution: output plane -> input plane.
        geom: ConvGeom,
        batch: usize,
        in_channels: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        mean: Vec<f64>,
        var: Vec<f64>,
    },
    Unary {
        x: Var,
        f: Unary,
    },
    Softmax {
        x: Var,
    },
    GlobalAvgPool {
        x: Var,
    },
    AvgPool {
        x: Var,
        k: usize,
    },
    Binary {
        a: Var,
        b: Var,
        f: Binary,
    },
    Scale {
        x: Var,
        c: f64,
    },
    AddScalar {
        x: Var,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    L1 {
        a: Var,
        b: Var,
    },
    L2 {
        a: Var,
        b: Var,
    },
    Cosine {
        a: Var,
        b: Var,
    },
    Normalize {
        x: Var,
    },
}

impl Op {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::Linear { .. } => OpKind::FullyConnected,
            Op::Norm { mode, .. } => match mode {
                NormMode::Instance => OpKind::InstanceNorm,
                _ => OpKind::BatchNorm,
            },
            Op::Unary { f, .. } => match f {
                Unary::Relu => OpKind::Relu,
                Unary::Sigmoid => OpKind::Sigmoid,
                Unary::Tanh => OpKind::Tanh,
                Unary::Log => OpKind::Log,
                Unary::Abs => OpKind::Abs,
                Unary::Square => OpKind::Square,
            },
            Op::Softmax { .. } => OpKind::Softmax,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::AvgPool { .. } => OpKind::AvgPool,
            Op::Binary { f, .. } => match f {
                Binary::Mul => OpKind::ElementwiseMul,
                Binary::Add => OpKind::ElementwiseAdd,
                Binary::Sub => OpKind::ElementwiseSub,
            },
            Op::Scale { .. } => OpKind::Scale,
            Op::AddScalar { .. } => OpKind::AddScalar,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Reshape { .. } => OpKind::Reshape,
            Op::Sum { .. } => OpKind::Sum,
            Op::Mean { .. } => OpKind::Mean,
            Op::L1 { .. } => OpKind::L1Distance,
            Op::L2 { .. } => OpKind::L2Distance,
            Op::Cosine { .. } => OpKind::CosineSimilarity,
            Op::Normalize { .. } => OpKind::Normalize,
        })
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A dynamic tape of tensor operations.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

fn shape_err(op: OpKind, detail: impl Into<alloc::string::String>) -> Error {
    Error::shape(op.name(), detail)
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + exp(-v))
    } else {
        let e = exp(v);
        e / (1.0 + e)
    }
}

/// Strides of `shape` for broadcasting into `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; shape.len()];
    let mut acc = 1;
    for d in (0..shape.len()).rev() {
        strides[d] = if shape[d] == 1 && out[d] != 1 { 0 } else { acc };
        acc *= shape[d];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every element of `out`.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let rank = out.len();
    let total: usize = out.iter().product();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let mut o = 0;
    while o < total {
        let mut ia = 0;
        let mut ib = 0;
        for d in 0..rank - 1 {
            ia += idx[d] * sa[d];
            ib += idx[d] * sb[d];
        }
        for j in 0..inner {
            f(o + j, ia + j * ia_step, ib + j * ib_step);
        }
        o += inner;
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            if idx[d] < out[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

fn outer_inner(shape: &[usize], axis: usize) -> (usize, usize) {
    (shape[..axis].iter().product(), shape[axis + 1..].iter().product())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is collected by [`Graph::backward`].
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `v`, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
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

    pub fn kind(&self, v: Var) -> Option<OpKind> {
        self.nodes[v.0].op.kind()
    }

    /// Gradient of the last backward pass with respect to leaf `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Like [`Graph::grad`] but returns zeros when nothing reached `v`.
    pub fn grad_or_zeros(&self, v: Var) -> Tensor {
        self.grads[v.0].clone().unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// Batch mean and biased variance computed by a training-mode batch norm node.
    pub fn norm_stats(&self, v: Var) -> Option<(&[f64], &[f64])> {
        match &self.nodes[v.0].op {
            Op::Norm {
                mode: NormMode::Batch,
                mean,
                var,
                ..
            } => Some((mean, var)),
            _ => None,
        }
    }

    // ------------------------------------------------------------------
    // Convolutions and dense layers
    // ------------------------------------------------------------------

    /// `x: [n, ci, h, w]`, `w: [co, ci, k, k]`, `b: [co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let op = OpKind::Conv2d;
        let (n, ci, h, wd) = self
            .value(x)
            .dims4()
            .map_err(|_| shape_err(op, "input must be rank 4"))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[1] != ci || ws[2] != ws[3] {
            return Err(shape_err(op, format!("weight {ws:?} does not fit input channels {ci}")));
        }
        let co = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err(op, format!("bias {:?} vs {co} outputs", self.shape(b))));
            }
        }
        let geom = ConvGeom::new(ci, h, wd, ws[2], stride, pad)
            .ok_or_else(|| shape_err(op, format!("kernel {} stride {stride} pad {pad} on {h}x{wd}", ws[2])))?;
        let p = geom.positions();
        let ld = n * p;
        let cols = im2col(self.value(x).data(), n, &geom);
        let mut out_cm = gemm(
            Mat::new(self.value(w).data(), co, geom.rows()),
            Mat::new(&cols, geom.rows(), ld),
        );
        if let Some(b) = b {
            let bias = self.value(b).data();
            for c in 0..co {
                out_cm[c * ld..(c + 1) * ld].iter_mut().for_each(|v| *v += bias[c]);
            }
        }
        let out = channel_to_batch_major(&out_cm, n, co, p);
        let value = Tensor::new(&[n, co, geom.oh, geom.ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                batch: n,
            },
            &inputs,
        ))
    }

    /// `x: [n, ci, h, w]`, `w: [ci, co, k, k]`, `b: [co]`; output `(h-1)*stride - 2*pad + k`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let op = OpKind::ConvTranspose2d;
        let (n, ci, h, wd) = self
            .value(x)
            .dims4()
            .map_err(|_| shape_err(op, "input must be rank 4"))?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != ci || ws[2] != ws[3] || stride == 0 {
            return Err(shape_err(op, format!("weight {ws:?} does not fit input channels {ci}")));
        }
        let (co, k) = (ws[1], ws[2]);
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return Err(shape_err(op, format!("bias {:?} vs {co} outputs", self.shape(b))));
            }
        }
        let full_h = (h - 1) * stride + k;
        let full_w = (wd - 1) * stride + k;
        if full_h <= 2 * pad || full_w <= 2 * pad {
            return Err(shape_err(op, format!("padding {pad} too large for {h}x{wd}")));
        }
        let (oh, ow) = (full_h - 2 * pad, full_w - 2 * pad);
        let geom = ConvGeom::new(co, oh, ow, k, stride, pad)
            .filter(|g| g.oh == h && g.ow == wd)
            .ok_or_else(|| shape_err(op, format!("inconsistent geometry {h}x{wd} -> {oh}x{ow}")))?;
        let p = h * wd;
        let ld = n * p;
        let x_cm = batch_to_channel_major(self.value(x).data(), n, ci, p);
        let cols = gemm(
            Mat::new(self.value(w).data(), ci, geom.rows()).t(),
            Mat::new(&x_cm, ci, ld),
        );
        let plane = co * oh * ow;
        let mut out = col2im(&cols, n, &geom);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for s in 0..n {
                for c in 0..co {
                    let off = s * plane + c * oh * ow;
                    out[off..off + oh * ow].iter_mut().for_each(|v| *v += bias[c]);
                }
            }
        }
        let value = Tensor::new(&[n, co, oh, ow], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(
            value,
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                batch: n,
                in_channels: ci,
            },
            &inputs,
        ))
    }

    /// Fully connected layer: `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let op = OpKind::FullyConnected;
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] {
            return Err(shape_err(op, format!("input {xs:?} with weight {ws:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        let mut out = gemm(
            Mat::new(self.value(x).data(), n, fin),
            Mat::new(self.value(w).data(), fout, fin).t(),
        );
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(shape_err(op, format!("bias {:?} vs {fout} outputs", self.shape(b))));
            }
            let bias = self.value(b).data();
            for row in out.chunks_mut(fout) {
                row.iter_mut().zip(bias).for_each(|(v, b)| *v += b);
            }
        }
        let value = Tensor::new(&[n, fout], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &inputs))
    }

    // ------------------------------------------------------------------
    // Normalisation
    // ------------------------------------------------------------------

    fn norm_layout(&self, x: Var, op: OpKind) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 {
            return Err(shape_err(op, format!("need at least [n, c], got {s:?}")));
        }
        Ok((s[0], s[1], s[2..].iter().product()))
    }

    fn check_affine(&self, op: OpKind, c: usize, params: &[Var]) -> Result<()> {
        for &p in params {
            if self.shape(p) != [c] {
                return Err(shape_err(
                    op,
                    format!("per-channel parameter {:?} vs {c} channels", self.shape(p)),
                ));
            }
        }
        Ok(())
    }

    /// Normalises each `(sample, channel)` plane over its spatial extent.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, s) = self.norm_layout(x, OpKind::InstanceNorm)?;
        self.check_affine(OpKind::InstanceNorm, c, &[gamma, beta])?;
        self.norm(x, gamma, beta, NormMode::Instance, n, c, s, None)
    }

    /// Training-mode batch norm: statistics over batch and spatial axes per channel.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c, s) = self.norm_layout(x, OpKind::BatchNorm)?;
        self.check_affine(OpKind::BatchNorm, c, &[gamma, beta])?;
        self.norm(x, gamma, beta, NormMode::Batch, n, c, s, None)
    }

    /// Inference-mode batch norm with stored running statistics.
    pub fn batch_norm_fixed(&mut self, x: Var, gamma: Var, beta: Var, mean: &[f64], var: &[f64]) -> Result<Var> {
        let (n, c, s) = self.norm_layout(x, OpKind::BatchNorm)?;
        self.check_affine(OpKind::BatchNorm, c, &[gamma, beta])?;
        if mean.len() != c || var.len() != c {
            return Err(shape_err(OpKind::BatchNorm, "running statistics length"));
        }
        self.norm(x, gamma, beta, NormMode::Fixed, n, c, s, Some((mean, var)))
    }

    #[allow(clippy::too_many_arguments)]
    fn norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        n: usize,
        c: usize,
        s: usize,
        fixed: Option<(&[f64], &[f64])>,
    ) -> Result<Var> {
        let groups = if mode == NormMode::Instance { n * c } else { c };
        let group_of = |sample: usize, ch: usize| {
            if mode == NormMode::Instance {
                sample * c + ch
            } else {
                ch
            }
        };
        let xv = self.value(x).data();
        let (mean, var) = match fixed {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let count = (n * c * s / groups) as f64;
                let mut mean = vec![0.0; groups];
                let mut var = vec![0.0; groups];
                for sample in 0..n {
                    for ch in 0..c {
                        let plane = &xv[(sample * c + ch) * s..(sample * c + ch + 1) * s];
                        mean[group_of(sample, ch)] += plane.iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|m| *m /= count);
                for sample in 0..n {
                    for ch in 0..c {
                        let g = group_of(sample, ch);
                        let plane = &xv[(sample * c + ch) * s..(sample * c + ch + 1) * s];
                        var[g] += plane.iter().map(|v| (v - mean[g]) * (v - mean[g])).sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= count);
                (mean, var)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / sqrt(v + NORM_EPS)).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![0.0; xv.len()];
        let mut out = vec![0.0; xv.len()];
        for sample in 0..n {
            for ch in 0..c {
                let g = group_of(sample, ch);
                let base = (sample * c + ch) * s;
                for i in base..base + s {
                    xhat[i] = (xv[i] - mean[g]) * inv_std[g];
                    out[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        let value = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            value,
            Op::Norm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
                mean,
                var,
            },
            &[x, gamma, beta],
        ))
    }

    // ------------------------------------------------------------------
    // Elementwise
    // ------------------------------------------------------------------

    fn unary(&mut self, x: Var, f: Unary) -> Var {
        let xv = self.value(x);
        let value = match f {
            Unary::Relu => xv.map(|v| if v > 0.0 { v } else { 0.0 }),
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::Tanh => xv.map(tanh),
            Unary::Log => xv.map(log),
            Unary::Abs => xv.map(fabs),
            Unary::Square => xv.map(|v| v * v),
        };
        self.push(value, Op::Unary { x, f }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Log)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(value, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar { x }, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, f: Binary, op: OpKind) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let apply = |x: f64, y: f64| match f {
            Binary::Mul => x * y,
            Binary::Add => x + y,
            Binary::Sub => x - y,
        };
        let value = if sa == sb {
            let data = av.iter().zip(bv).map(|(&x, &y)| apply(x, y)).collect();
            Tensor::new(&sa, data)?
        } else {
            if sa.len() != sb.len() || sa.iter().zip(&sb).any(|(&p, &q)| p != q && p != 1 && q != 1) {
                return Err(shape_err(op, format!("cannot broadcast {sa:?} with {sb:?}")));
            }
            let out: Vec<usize> = sa.iter().zip(&sb).map(|(&p, &q)| p.max(q)).collect();
            let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
            let mut data = vec![0.0; out.iter().product()];
            for_each_broadcast(&out, &ta, &tb, |o, i, j| data[o] = apply(av[i], bv[j]));
            Tensor::new(&out, data)?
        };
        Ok(self.push(value, Op::Binary { a, b, f }, &[a, b]))
    }

    /// Elementwise product with same-rank broadcasting over unit axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul, OpKind::ElementwiseMul)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add, OpKind::ElementwiseAdd)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub, OpKind::ElementwiseSub)
    }

    // ------------------------------------------------------------------
    // Channel-wise and spatial reductions
    // ------------------------------------------------------------------

    /// Log-sum-exp stabilised softmax over axis 1.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err(OpKind::Softmax, format!("need [n, c, ..], got {s:?}")));
        }
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![0.0; xv.len()];
        for sample in 0..n {
            let base = sample * c * inner;
            for i in 0..inner {
                let max = (0..c)
                    .map(|ch| xv[base + ch * inner + i])
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for ch in 0..c {
                    let e = exp(xv[base + ch * inner + i] - max);
                    out[base + ch * inner + i] = e;
                    total += e;
                }
                for ch in 0..c {
                    out[base + ch * inner + i] /= total;
                }
            }
        }
        let value = Tensor::new(&s, out)?;
        Ok(self.push(value, Op::Softmax { x }, &[x]))
    }

    /// `[n, c, h, w] -> [n, c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self
            .value(x)
            .dims4()
            .map_err(|_| shape_err(OpKind::GlobalAvgPool, "input must be rank 4"))?;
        let p = (h * w) as f64;
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|plane| plane.iter().sum::<f64>() / p)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool { x }, &[x]))
    }

    /// Non-overlapping `k x k` average pooling.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self
            .value(x)
            .dims4()
            .map_err(|_| shape_err(OpKind::AvgPool, "input must be rank 4"))?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err(OpKind::AvgPool, format!("window {k} does not tile {h}x{w}")));
        }
        if k == 1 {
            let value = self.value(x).clone();
            return Ok(self.push(value, Op::AvgPool { x, k }, &[x]));
        }
        let (oh, ow) = (h / k, w / k);
        let xv = self.value(x).data();
        let inv = 1.0 / (k * k) as f64;
        let mut out = vec![0.0; n * c * oh * ow];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for y in 0..h {
                for xx in 0..w {
                    dst[(y / k) * ow + xx / k] += src[y * w + xx] * inv;
                }
            }
        }
        let value = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool { x, k }, &[x]))
    }

    // ------------------------------------------------------------------
    // Structure
    // ------------------------------------------------------------------

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let op = OpKind::Concat;
        let first = self
            .shape(*inputs.first().ok_or_else(|| shape_err(op, "no inputs"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(shape_err(op, format!("axis {axis} for rank {}", first.len())));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible =
                s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(d, (p, q))| d == axis || p == q);
            if !compatible {
                return Err(shape_err(op, format!("{s:?} vs {first:?} along axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, inner) = outer_inner(&first, axis);
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for &v in inputs {
            let d = self.shape(v)[axis];
            let src = self.value(v).data();
            for o in 0..outer {
                let dst = o * total * inner + offset * inner;
                data[dst..dst + d * inner].copy_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
            offset += d;
        }
        let value = Tensor::new(&out_shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        ))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err(
                OpKind::Slice,
                format!("{start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, inner) = outer_inner(&s, axis);
        let d = s[axis];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * d + start) * inner;
            data.extend_from_slice(&src[from..from + len * inner]);
        }
        let mut out = s.clone();
        out[axis] = len;
        let value = Tensor::new(&out, data)?;
        Ok(self.push(value, Op::Slice { x, axis, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self
            .value(x)
            .clone()
            .reshape(shape)
            .map_err(|_| shape_err(OpKind::Reshape, format!("{:?} -> {shape:?}", self.shape(x))))?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Flattens everything after the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product::<usize>().max(1);
        self.reshape(x, &[n, rest])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean { x }, &[x])
    }

    fn check_same(&self, op: OpKind, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        Ok(())
    }

    fn rows(&self, v: Var) -> (usize, usize) {
        let s = self.shape(v);
        let n = if s.len() > 1 { s[0] } else { 1 };
        (n, self.value(v).len() / n)
    }

    /// Mean absolute difference, a scalar.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(OpKind::L1Distance, a, b)?;
        let m = self.value(a).mean_abs_diff(self.value(b));
        Ok(self.push(Tensor::scalar(m), Op::L1 { a, b }, &[a, b]))
    }

    /// Euclidean distance per row (leading axis): `[n, ..] -> [n]`.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(OpKind::L2Distance, a, b)?;
        let (n, d) = self.rows(a);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = (0..n)
            .map(|r| {
                sqrt(
                    av[r * d..(r + 1) * d]
                        .iter()
                        .zip(&bv[r * d..(r + 1) * d])
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>(),
                )
            })
            .collect();
        Ok(self.push(Tensor::new(&[n], data)?, Op::L2 { a, b }, &[a, b]))
    }

    /// Cosine similarity per row: `[n, d] -> [n]`. Zero rows give 0.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same(OpKind::CosineSimilarity, a, b)?;
        let (n, d) = self.rows(a);
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let data = (0..n)
            .map(|r| {
                let (x, y) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                let nx = sqrt(x.iter().map(|p| p * p).sum::<f64>());
                let ny = sqrt(y.iter().map(|q| q * q).sum::<f64>());
                if nx == 0.0 || ny == 0.0 {
                    0.0
                } else {
                    dot / (nx * ny)
                }
            })
            .collect();
        Ok(self.push(Tensor::new(&[n], data)?, Op::Cosine { a, b }, &[a, b]))
    }

    /// Scales each row to unit Euclidean norm.
    pub fn normalize(&mut self, x: Var) -> Result<Var> {
        let (n, d) = self.rows(x);
        let xv = self.value(x).data();
        let mut data = vec![0.0; xv.len()];
        for r in 0..n {
            let row = &xv[r * d..(r + 1) * d];
            let norm = sqrt(row.iter().map(|v| v * v).sum::<f64>());
            if norm > 0.0 {
                for (o, v) in data[r * d..(r + 1) * d].iter_mut().zip(row) {
                    *o = v / norm;
                }
            }
        }
        let value = Tensor::new(self.shape(x), data)?;
        Ok(self.push(value, Op::Normalize { x }, &[x]))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Propagates d(output)/d(leaf) into every variable leaf reachable from `output`.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        let shape = self.shape(output);
        if shape != [1] {
            return Err(Error::NonScalarOutput(shape.to_vec()));
        }
        self.zero_grad();
        if !self.nodes[output.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(dy) = adj[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                let shape = self.nodes[i].value.shape().to_vec();
                self.grads[i] = Some(Tensor::new(&shape, dy)?);
                continue;
            }
            self.propagate(i, &dy, &mut adj);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        match &mut adj[v.0] {
            Some(existing) => existing.iter_mut().zip(&g).for_each(|(e, d)| *e += d),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, dy: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, batch } => {
                let (n, p, co) = (*batch, geom.positions(), self.shape(*w)[0]);
                let ld = n * p;
                let dy_cm = batch_to_channel_major(dy, n, co, p);
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let g = (0..co).map(|c| dy_cm[c * ld..(c + 1) * ld].iter().sum()).collect();
                    Self::accumulate(adj, b, g);
                }
                if self.wants(*w) {
                    let cols = im2col(self.value(*x).data(), n, geom);
                    let gw = gemm(Mat::new(&dy_cm, co, ld), Mat::new(&cols, geom.rows(), ld).t());
                    Self::accumulate(adj, *w, gw);
                }
                if self.wants(*x) {
                    let dcols = gemm(
                        Mat::new(self.value(*w).data(), co, geom.rows()).t(),
                        Mat::new(&dy_cm, co, ld),
                    );
                    Self::accumulate(adj, *x, col2im(&dcols, n, geom));
                }
            }
            Op::ConvTranspose2d {
                x,
                w,
                b,
                geom,
                batch,
                in_channels,
            } => {
                let (n, ci) = (*batch, *in_channels);
                let p = geom.positions();
                let ld = n * p;
                let plane = geom.channels * geom.h * geom.w;
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let hw = geom.h * geom.w;
                    let mut g = vec![0.0; geom.channels];
                    for s in 0..n {
                        for (c, gc) in g.iter_mut().enumerate() {
                            let off = s * plane + c * hw;
                            *gc += dy[off..off + hw].iter().sum::<f64>();
                        }
                    }
                    Self::accumulate(adj, b, g);
                }
                let need_w = self.wants(*w);
                let need_x = self.wants(*x);
                if need_w || need_x {
                    let dcols = im2col(dy, n, geom);
                    if need_w {
                        let x_cm = batch_to_channel_major(self.value(*x).data(), n, ci, p);
                        let gw = gemm(Mat::new(&x_cm, ci, ld), Mat::new(&dcols, geom.rows(), ld).t());
                        Self::accumulate(adj, *w, gw);
                    }
                    if need_x {
                        let dx_cm = gemm(
                            Mat::new(self.value(*w).data(), ci, geom.rows()),
                            Mat::new(&dcols, geom.rows(), ld),
                        );
                        Self::accumulate(adj, *x, channel_to_batch_major(&dx_cm, n, ci, p));
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, fin) = (xs[0], xs[1]);
                let fout = self.shape(*w)[0];
                if let Some(b) = b.filter(|b| self.wants(*b)) {
                    let mut g = vec![0.0; fout];
                    for row in dy.chunks(fout) {
                        g.iter_mut().zip(row).for_each(|(a, d)| *a += d);
                    }
                    Self::accumulate(adj, b, g);
                }
                if self.wants(*w) {
                    let gw = gemm(Mat::new(dy, n, fout).t(), Mat::new(self.value(*x).data(), n, fin));
                    Self::accumulate(adj, *w, gw);
                }
                if self.wants(*x) {
                    let dx = gemm(Mat::new(dy, n, fout), Mat::new(self.value(*w).data(), fout, fin));
                    Self::accumulate(adj, *x, dx);
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                mode,
                xhat,
                inv_std,
                ..
            } => {
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let sp: usize = s[2..].iter().product();
                let groups = inv_std.len();
                let group_of = |sample: usize, ch: usize| {
                    if *mode == NormMode::Instance {
                        sample * c + ch
                    } else {
                        ch
                    }
                };
                let gv = self.value(*gamma).data();
                if self.wants(*beta) {
                    let mut g = vec![0.0; c];
                    for sample in 0..n {
                        for (ch, gc) in g.iter_mut().enumerate() {
                            let base = (sample * c + ch) * sp;
                            *gc += dy[base..base + sp].iter().sum::<f64>();
                        }
                    }
                    Self::accumulate(adj, *beta, g);
                }
                if self.wants(*gamma) {
                    let mut g = vec![0.0; c];
                    for sample in 0..n {
                        for (ch, gc) in g.iter_mut().enumerate() {
                            let base = (sample * c + ch) * sp;
                            *gc += (base..base + sp).map(|i| dy[i] * xhat[i]).sum::<f64>();
                        }
                    }
                    Self::accumulate(adj, *gamma, g);
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; dy.len()];
                    if *mode == NormMode::Fixed {
                        for sample in 0..n {
                            for ch in 0..c {
                                let base = (sample * c + ch) * sp;
                                let k = gv[ch] * inv_std[ch];
                                for i in base..base + sp {
                                    dx[i] = dy[i] * k;
                                }
                            }
                        }
                    } else {
                        let count = (n * c * sp / groups) as f64;
                        let mut sum_d = vec![0.0; groups];
                        let mut sum_dx = vec![0.0; groups];
                        for sample in 0..n {
                            for ch in 0..c {
                                let g = group_of(sample, ch);
                                let base = (sample * c + ch) * sp;
                                for i in base..base + sp {
                                    let d = dy[i] * gv[ch];
                                    sum_d[g] += d;
                                    sum_dx[g] += d * xhat[i];
                                }
                            }
                        }
                        for sample in 0..n {
                            for ch in 0..c {
                                let g = group_of(sample, ch);
                                let base = (sample * c + ch) * sp;
                                for i in base..base + sp {
                                    let d = dy[i] * gv[ch];
                                    dx[i] = inv_std[g] * (d - sum_d[g] / count - xhat[i] * sum_dx[g] / count);
                                }
                            }
                        }
                    }
                    Self::accumulate(adj, *x, dx);
                }
            }
            Op::Unary { x, f } => {
                if !self.wants(*x) {
                    return;
                }
                let xv = self.value(*x).data();
                let dx = match f {
                    Unary::Relu => dy
                        .iter()
                        .zip(xv)
                        .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                        .collect(),
                    Unary::Sigmoid => dy.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect(),
                    Unary::Tanh => dy.iter().zip(y).map(|(d, t)| d * (1.0 - t * t)).collect(),
                    Unary::Log => dy.iter().zip(xv).map(|(d, v)| d / v).collect(),
                    Unary::Abs => dy
                        .iter()
                        .zip(xv)
                        .map(|(d, &v)| {
                            if v > 0.0 {
                                *d
                            } else if v < 0.0 {
                                -d
                            } else {
                                0.0
                            }
                        })
                        .collect(),
                    Unary::Square => dy.iter().zip(xv).map(|(d, v)| 2.0 * d * v).collect(),
                };
                Self::accumulate(adj, *x, dx);
            }
            Op::Scale { x, c } => {
                if self.wants(*x) {
                    Self::accumulate(adj, *x, dy.iter().map(|d| d * c).collect());
                }
            }
            Op::AddScalar { x } | Op::Reshape { x } => {
                if self.wants(*x) {
                    Self::accumulate(adj, *x, dy.to_vec());
                }
            }
            Op::Softmax { x } => {
                if !self.wants(*x) {
                    return;
                }
                let s = self.shape(*x);
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut dx = vec![0.0; dy.len()];
                for sample in 0..n {
                    let base = sample * c * inner;
                    for i in 0..inner {
                        let dot: f64 = (0..c)
                            .map(|ch| dy[base + ch * inner + i] * y[base + ch * inner + i])
                            .sum();
                        for ch in 0..c {
                            let k = base + ch * inner + i;
                            dx[k] = y[k] * (dy[k] - dot);
                        }
                    }
                }
                Self::accumulate(adj, *x, dx);
            }
            Op::GlobalAvgPool { x } => {
                if !self.wants(*x) {
                    return;
                }
                let s = self.shape(*x);
                let p = s[2] * s[3];
                let mut dx = vec![0.0; self.value(*x).len()];
                for (plane, d) in dy.iter().enumerate() {
                    dx[plane * p..(plane + 1) * p]
                        .iter_mut()
                        .for_each(|v| *v = d / p as f64);
                }
                Self::accumulate(adj, *x, dx);
            }
            Op::AvgPool { x, k } => {
                if !self.wants(*x) {
                    return;
                }
                let k = *k;
                if k == 1 {
                    Self::accumulate(adj, *x, dy.to_vec());
                    return;
                }
                let s = self.shape(*x);
                let (h, w) = (s[2], s[3]);
                let (oh, ow) = (h / k, w / k);
                let inv = 1.0 / (k * k) as f64;
                let planes = s[0] * s[1];
                let mut dx = vec![0.0; planes * h * w];
                for plane in 0..planes {
                    let src = &dy[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for yy in 0..h {
                        for xx in 0..w {
                            dst[yy * w + xx] = src[(yy / k) * ow + xx / k] * inv;
                        }
                    }
                }
                Self::accumulate(adj, *x, dx);
            }
            Op::Binary { a, b, f } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let out = node.value.shape();
                let mut ga = if self.wants(*a) {
                    Some(vec![0.0; av.len()])
                } else {
                    None
                };
                let mut gb = if self.wants(*b) {
                    Some(vec![0.0; bv.len()])
                } else {
                    None
                };
                let mut step = |o: usize, i: usize, j: usize| {
                    let d = dy[o];
                    let (da, db) = match f {
                        Binary::Mul => (d * bv[j], d * av[i]),
                        Binary::Add => (d, d),
                        Binary::Sub => (d, -d),
                    };
                    if let Some(g) = ga.as_mut() {
                        g[i] += da;
                    }
                    if let Some(g) = gb.as_mut() {
                        g[j] += db;
                    }
                };
                if sa == sb {
                    (0..dy.len()).for_each(|k| step(k, k, k));
                } else {
                    let (ta, tb) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
                    for_each_broadcast(out, &ta, &tb, step);
                }
                if let Some(g) = ga {
                    Self::accumulate(adj, *a, g);
                }
                if let Some(g) = gb {
                    Self::accumulate(adj, *b, g);
                }
            }
            Op::Concat { inputs, axis } => {
                let out = node.value.shape();
                let total = out[*axis];
                let (outer, inner) = outer_inner(out, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let d = self.shape(v)[*axis];
                    if self.wants(v) {
                        let mut g = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let from = o * total * inner + offset * inner;
                            g.extend_from_slice(&dy[from..from + d * inner]);
                        }
                        Self::accumulate(adj, v, g);
                    }
                    offset += d;
                }
            }
            Op::Slice { x, axis, start } => {
                if !self.wants(*x) {
                    return;
                }
                let s = self.shape(*x);
                let (outer, inner) = outer_inner(s, *axis);
                let d = s[*axis];
                let len = node.value.shape()[*axis];
                let mut dx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let to = (o * d + start) * inner;
                    dx[to..to + len * inner].copy_from_slice(&dy[o * len * inner..(o + 1) * len * inner]);
                }
                Self::accumulate(adj, *x, dx);
            }
            Op::Sum { x } => {
                if self.wants(*x) {
                    Self::accumulate(adj, *x, vec![dy[0]; self.value(*x).len()]);
                }
            }
            Op::Mean { x } => {
                if self.wants(*x) {
                    let len = self.value(*x).len();
                    Self::accumulate(adj, *x, vec![dy[0] / len as f64; len]);
                }
            }
            Op::L1 { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let k = dy[0] / av.len() as f64;
                let sign: Vec<f64> = av
                    .iter()
                    .zip(bv)
                    .map(|(p, q)| {
                        if p > q {
                            k
                        } else if p < q {
                            -k
                        } else {
                            0.0
                        }
                    })
                    .collect();
                if self.wants(*b) {
                    Self::accumulate(adj, *b, sign.iter().map(|v| -v).collect());
                }
                if self.wants(*a) {
                    Self::accumulate(adj, *a, sign);
                }
            }
            Op::L2 { a, b } => {
                let (n, d) = self.rows(*a);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; n * d];
                for r in 0..n {
                    if y[r] == 0.0 {
                        continue;
                    }
                    let k = dy[r] / y[r];
                    for j in r * d..(r + 1) * d {
                        ga[j] = k * (av[j] - bv[j]);
                    }
                }
                if self.wants(*b) {
                    Self::accumulate(adj, *b, ga.iter().map(|v| -v).collect());
                }
                if self.wants(*a) {
                    Self::accumulate(adj, *a, ga);
                }
            }
            Op::Cosine { a, b } => {
                let (n, d) = self.rows(*a);
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut ga = vec![0.0; n * d];
                let mut gb = vec![0.0; n * d];
                for r in 0..n {
                    let (x, z) = (&av[r * d..(r + 1) * d], &bv[r * d..(r + 1) * d]);
                    let nx = sqrt(x.iter().map(|p| p * p).sum::<f64>());
                    let nz = sqrt(z.iter().map(|p| p * p).sum::<f64>());
                    if nx == 0.0 || nz == 0.0 {
                        continue;
                    }
                    let cos = y[r];
                    for j in 0..d {
                        ga[r * d + j] = dy[r] * (z[j] / (nx * nz) - cos * x[j] / (nx * nx));
                        gb[r * d + j] = dy[r] * (x[j] / (nx * nz) - cos * z[j] / (nz * nz));
                    }
                }
                if self.wants(*a) {
                    Self::accumulate(adj, *a, ga);
                }
                if self.wants(*b) {
                    Self::accumulate(adj, *b, gb);
                }
            }
            Op::Normalize { x } => {
                if !self.wants(*x) {
                    return;
                }
                let (n, d) = self.rows(*x);
                let xv = self.value(*x).data();
                let mut dx = vec![0.0; n * d];
                for r in 0..n {
                    let row = &xv[r * d..(r + 1) * d];
                    let norm = sqrt(row.iter().map(|v| v * v).sum::<f64>());
                    if norm == 0.0 {
                        continue;
                    }
                    let yr = &y[r * d..(r + 1) * d];
                    let dr = &dy[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(dr).map(|(p, q)| p * q).sum();
                    for j in 0..d {
                        dx[r * d + j] = (dr[j] - yr[j] * dot) / norm;
                    }
                }
                Self::accumulate(adj, *x, dx);
            }
        }
    }
}
