//! Reverse-mode tape.
//!
//! Every operator call appends one node holding its output value, its inputs
//! and whatever intermediates its backward rule needs. `backward` sweeps the
//! nodes in reverse insertion order, so gradient accumulation order is fixed by
//! the order of the forward calls.

use std::fmt;

use super::kernels::{self, ConvGeom, Exec};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operator inventory. Every member has a forward rule in [`Tape::apply`] and a
/// backward rule in [`Tape::backward`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpId {
    Add,
    Sub,
    Mul,
    Matmul,
    Conv2d,
    NearestUpsample2x,
    Relu,
    Sigmoid,
    Tanh,
    BatchNorm2d,
    ConcatChannels,
    Mean,
    Sum,
    BceWithLogits,
    SoftmaxCrossEntropy,
    Square,
    L2Distance,
    Scale,
    AddScalar,
    Reshape,
    Narrow,
    AddRowBias,
    GlobalAvgPool,
    SoftBoxMask,
}

impl OpId {
    pub const ALL: [OpId; 24] = [
        OpId::Add,
        OpId::Sub,
        OpId::Mul,
        OpId::Matmul,
        OpId::Conv2d,
        OpId::NearestUpsample2x,
        OpId::Relu,
        OpId::Sigmoid,
        OpId::Tanh,
        OpId::BatchNorm2d,
        OpId::ConcatChannels,
        OpId::Mean,
        OpId::Sum,
        OpId::BceWithLogits,
        OpId::SoftmaxCrossEntropy,
        OpId::Square,
        OpId::L2Distance,
        OpId::Scale,
        OpId::AddScalar,
        OpId::Reshape,
        OpId::Narrow,
        OpId::AddRowBias,
        OpId::GlobalAvgPool,
        OpId::SoftBoxMask,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpId::Add => "add",
            OpId::Sub => "sub",
            OpId::Mul => "mul",
            OpId::Matmul => "matmul",
            OpId::Conv2d => "conv2d",
            OpId::NearestUpsample2x => "nearest_upsample2x",
            OpId::Relu => "relu",
            OpId::Sigmoid => "sigmoid",
            OpId::Tanh => "tanh",
            OpId::BatchNorm2d => "batchnorm2d",
            OpId::ConcatChannels => "concat_channels",
            OpId::Mean => "mean",
            OpId::Sum => "sum",
            OpId::BceWithLogits => "bce_with_logits",
            OpId::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpId::Square => "square",
            OpId::L2Distance => "l2_distance",
            OpId::Scale => "scale",
            OpId::AddScalar => "add_scalar",
            OpId::Reshape => "reshape",
            OpId::Narrow => "narrow",
            OpId::AddRowBias => "add_row_bias",
            OpId::GlobalAvgPool => "global_avg_pool",
            OpId::SoftBoxMask => "soft_box_mask",
        }
    }
}

impl fmt::Display for OpId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Batch normalization statistics source.
#[derive(Clone, Debug, PartialEq)]
pub enum BnMode<T> {
    /// Normalize with the statistics of the current batch.
    Train { eps: T },
    /// Normalize with fixed running statistics.
    Eval { mean: Vec<T>, var: Vec<T>, eps: T },
}

/// Operator plus its non-tensor attributes.
#[derive(Clone, Debug, PartialEq)]
pub enum Attrs<T> {
    Add,
    Sub,
    Mul,
    Matmul,
    /// Inputs: `x` (n,c,h,w), weight (o,c,3,3), bias (o). Zero padding 1.
    Conv2d {
        stride: usize,
    },
    NearestUpsample2x,
    Relu,
    Sigmoid,
    Tanh,
    /// Inputs: `x` (n,c,h,w), gamma (c), beta (c).
    BatchNorm2d(BnMode<T>),
    ConcatChannels,
    Mean,
    Sum,
    /// Mean binary cross-entropy of logits against fixed targets.
    BceWithLogits {
        targets: Vec<T>,
    },
    /// Mean softmax cross-entropy of (n,c) logits against class indices.
    SoftmaxCrossEntropy {
        labels: Vec<usize>,
    },
    Square,
    /// Mean squared difference of two equally shaped tensors.
    L2Distance,
    Scale(T),
    AddScalar(T),
    Reshape(Vec<usize>),
    Narrow {
        axis: usize,
        start: usize,
        len: usize,
    },
    /// Inputs: `x` (n,f), bias (f).
    AddRowBias,
    /// (n,c,h,w) to (n,c).
    GlobalAvgPool,
    /// Separable sigmoid box window. Input: centers (n,2) as (x, y) pixel
    /// coordinates. Output (n,1,height,width).
    SoftBoxMask {
        half_w: T,
        half_h: T,
        k: T,
        height: usize,
        width: usize,
    },
}

impl<T> Attrs<T> {
    pub fn id(&self) -> OpId {
        match self {
            Attrs::Add => OpId::Add,
            Attrs::Sub => OpId::Sub,
            Attrs::Mul => OpId::Mul,
            Attrs::Matmul => OpId::Matmul,
            Attrs::Conv2d { .. } => OpId::Conv2d,
            Attrs::NearestUpsample2x => OpId::NearestUpsample2x,
            Attrs::Relu => OpId::Relu,
            Attrs::Sigmoid => OpId::Sigmoid,
            Attrs::Tanh => OpId::Tanh,
            Attrs::BatchNorm2d(_) => OpId::BatchNorm2d,
            Attrs::ConcatChannels => OpId::ConcatChannels,
            Attrs::Mean => OpId::Mean,
            Attrs::Sum => OpId::Sum,
            Attrs::BceWithLogits { .. } => OpId::BceWithLogits,
            Attrs::SoftmaxCrossEntropy { .. } => OpId::SoftmaxCrossEntropy,
            Attrs::Square => OpId::Square,
            Attrs::L2Distance => OpId::L2Distance,
            Attrs::Scale(_) => OpId::Scale,
            Attrs::AddScalar(_) => OpId::AddScalar,
            Attrs::Reshape(_) => OpId::Reshape,
            Attrs::Narrow { .. } => OpId::Narrow,
            Attrs::AddRowBias => OpId::AddRowBias,
            Attrs::GlobalAvgPool => OpId::GlobalAvgPool,
            Attrs::SoftBoxMask { .. } => OpId::SoftBoxMask,
        }
    }
}

// Intermediates kept for the backward rule.
enum Saved<T> {
    None,
    Conv(ConvGeom, usize),
    BatchNorm {
        xhat: Vec<T>,
        inv_std: Vec<T>,
        mean: Vec<T>,
        var: Vec<T>,
    },
    Channels(Vec<usize>),
    Probs(Vec<T>),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    record: Option<(Attrs<T>, Vec<Var>, Saved<T>)>,
}

/// Ordered record of operator applications.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    exec: Exec,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: OpId, a: &[usize], b: &[usize]) -> Error {
    Error::OpShape {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

fn dims4(op: OpId, s: &[usize]) -> Result<(usize, usize, usize, usize)> {
    match s {
        [n, c, h, w] => Ok((*n, *c, *h, *w)),
        _ => Err(Error::OpShape {
            op,
            left: s.to_vec(),
            right: vec![],
        }),
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            exec,
        }
    }

    pub fn exec(&self) -> Exec {
        self.exec
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, None)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Constant copy of `v`'s current value; gradients stop here.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` loss with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn op_of(&self, v: Var) -> Option<OpId> {
        self.nodes[v.0].record.as_ref().map(|(a, _, _)| a.id())
    }

    /// Batch mean and (biased) variance recorded by a training-mode
    /// batchnorm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].record {
            Some((
                Attrs::BatchNorm2d(BnMode::Train { .. }),
                _,
                Saved::BatchNorm { mean, var, .. },
            )) => Some((mean, var)),
            _ => None,
        }
    }

    fn push(
        &mut self,
        value: Tensor<T>,
        requires_grad: bool,
        record: Option<(Attrs<T>, Vec<Var>, Saved<T>)>,
    ) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            record,
        });
        Var(self.nodes.len() - 1)
    }

    /// Applies `attrs` to `inputs` and records the result.
    pub fn apply(&mut self, attrs: Attrs<T>, inputs: &[Var]) -> Result<Var> {
        let op = attrs.id();
        let arity = match op {
            OpId::ConcatChannels => None,
            OpId::Add
            | OpId::Sub
            | OpId::Mul
            | OpId::Matmul
            | OpId::L2Distance
            | OpId::AddRowBias => Some(2),
            OpId::Conv2d | OpId::BatchNorm2d => Some(3),
            _ => Some(1),
        };
        if let Some(k) = arity {
            if inputs.len() != k {
                return Err(Error::Shape(format!(
                    "{op}: expected {k} inputs, got {}",
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::Shape(format!("{op}: needs at least one input")));
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let (value, saved) = self.forward_rule(&attrs, inputs)?;
        Ok(self.push(value, requires_grad, Some((attrs, inputs.to_vec(), saved))))
    }

    fn forward_rule(&self, attrs: &Attrs<T>, inputs: &[Var]) -> Result<(Tensor<T>, Saved<T>)> {
        let op = attrs.id();
        let x = self.value(inputs[0]);
        let unary = |f: &dyn Fn(T) -> T| -> Result<(Tensor<T>, Saved<T>)> {
            let data = x.data().iter().map(|&v| f(v)).collect();
            Ok((Tensor::new(x.shape().to_vec(), data)?, Saved::None))
        };
        match attrs {
            Attrs::Add | Attrs::Sub | Attrs::Mul => {
                let y = self.value(inputs[1]);
                let f = |a: T, b: T| match attrs {
                    Attrs::Add => a + b,
                    Attrs::Sub => a - b,
                    _ => a * b,
                };
                let (shape, data): (Vec<usize>, Vec<T>) = if x.shape() == y.shape() {
                    (
                        x.shape().to_vec(),
                        x.data()
                            .iter()
                            .zip(y.data())
                            .map(|(&a, &b)| f(a, b))
                            .collect(),
                    )
                } else if y.numel() == 1 {
                    let b = y.item();
                    (
                        x.shape().to_vec(),
                        x.data().iter().map(|&a| f(a, b)).collect(),
                    )
                } else if x.numel() == 1 {
                    let a = x.item();
                    (
                        y.shape().to_vec(),
                        y.data().iter().map(|&b| f(a, b)).collect(),
                    )
                } else {
                    return Err(mismatch(op, x.shape(), y.shape()));
                };
                Ok((Tensor::new(shape, data)?, Saved::None))
            }
            Attrs::Matmul => {
                let y = self.value(inputs[1]);
                let (m, k, n) = match (x.shape(), y.shape()) {
                    ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
                    _ => return Err(mismatch(op, x.shape(), y.shape())),
                };
                let mut out = vec![T::zero(); m * n];
                kernels::gemm_acc(m, k, n, x.data(), y.data(), &mut out);
                Ok((Tensor::new([m, n], out)?, Saved::None))
            }
            Attrs::Conv2d { stride } => {
                let w = self.value(inputs[1]);
                let b = self.value(inputs[2]);
                let (n, c, h, wd) = dims4(op, x.shape())?;
                let (co, ci) = match w.shape() {
                    [co, ci, 3, 3] => (*co, *ci),
                    _ => return Err(mismatch(op, x.shape(), w.shape())),
                };
                if ci != c || b.shape() != [co] || !(*stride == 1 || *stride == 2) {
                    return Err(mismatch(op, x.shape(), w.shape()));
                }
                let g = ConvGeom {
                    c_in: c,
                    c_out: co,
                    h,
                    w: wd,
                    stride: *stride,
                };
                let out = kernels::conv2d_forward(self.exec, &g, n, x.data(), w.data(), b.data());
                Ok((
                    Tensor::new([n, co, g.out_h(), g.out_w()], out)?,
                    Saved::Conv(g, n),
                ))
            }
            Attrs::NearestUpsample2x => {
                let (n, c, h, w) = dims4(op, x.shape())?;
                let (h2, w2) = (2 * h, 2 * w);
                let mut out = vec![T::zero(); n * c * h2 * w2];
                for (p, plane) in out.chunks_mut(h2 * w2).enumerate() {
                    let src = &x.data()[p * h * w..(p + 1) * h * w];
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            plane[y * w2 + xx] = src[(y / 2) * w + xx / 2];
                        }
                    }
                }
                Ok((Tensor::new([n, c, h2, w2], out)?, Saved::None))
            }
            Attrs::Relu => unary(&|v| v.max(T::zero())),
            Attrs::Sigmoid => unary(&sigmoid),
            Attrs::Tanh => unary(&|v| v.tanh()),
            Attrs::Square => unary(&|v| v * v),
            Attrs::Scale(c) => unary(&|v| v * *c),
            Attrs::AddScalar(c) => unary(&|v| v + *c),
            Attrs::BatchNorm2d(mode) => {
                let gamma = self.value(inputs[1]);
                let beta = self.value(inputs[2]);
                let (n, c, h, w) = dims4(op, x.shape())?;
                if gamma.shape() != [c] || beta.shape() != [c] {
                    return Err(mismatch(op, x.shape(), gamma.shape()));
                }
                let plane = h * w;
                let m = T::from_f64c((n * plane) as f64);
                let channel = |ch: usize| {
                    (0..n).flat_map(move |s| {
                        let off = (s * c + ch) * plane;
                        off..off + plane
                    })
                };
                let (mean, var, eps) = match mode {
                    BnMode::Train { eps } => {
                        let mut mean = vec![T::zero(); c];
                        let mut var = vec![T::zero(); c];
                        for ch in 0..c {
                            let mu = channel(ch).map(|i| x.data()[i]).sum::<T>() / m;
                            let v = channel(ch)
                                .map(|i| {
                                    let d = x.data()[i] - mu;
                                    d * d
                                })
                                .sum::<T>()
                                / m;
                            mean[ch] = mu;
                            var[ch] = v;
                        }
                        (mean, var, *eps)
                    }
                    BnMode::Eval { mean, var, eps } => {
                        if mean.len() != c || var.len() != c {
                            return Err(mismatch(op, x.shape(), &[mean.len()]));
                        }
                        (mean.clone(), var.clone(), *eps)
                    }
                };
                let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
                let mut xhat = vec![T::zero(); x.numel()];
                let mut out = vec![T::zero(); x.numel()];
                for ch in 0..c {
                    for i in channel(ch) {
                        let xh = (x.data()[i] - mean[ch]) * inv_std[ch];
                        xhat[i] = xh;
                        out[i] = gamma.data()[ch] * xh + beta.data()[ch];
                    }
                }
                Ok((
                    Tensor::new(x.shape().to_vec(), out)?,
                    Saved::BatchNorm {
                        xhat,
                        inv_std,
                        mean,
                        var,
                    },
                ))
            }
            Attrs::ConcatChannels => {
                let (n, _, h, w) = dims4(op, x.shape())?;
                let mut channels = Vec::with_capacity(inputs.len());
                for &v in inputs {
                    let t = self.value(v);
                    let (n2, c2, h2, w2) = dims4(op, t.shape())?;
                    if (n2, h2, w2) != (n, h, w) {
                        return Err(mismatch(op, x.shape(), t.shape()));
                    }
                    channels.push(c2);
                }
                let total: usize = channels.iter().sum();
                let plane = h * w;
                let mut out = Vec::with_capacity(n * total * plane);
                for s in 0..n {
                    for (&v, &c) in inputs.iter().zip(&channels) {
                        out.extend_from_slice(
                            &self.value(v).data()[s * c * plane..(s + 1) * c * plane],
                        );
                    }
                }
                Ok((
                    Tensor::new([n, total, h, w], out)?,
                    Saved::Channels(channels),
                ))
            }
            Attrs::Mean => {
                let s: T = x.data().iter().copied().sum();
                Ok((
                    Tensor::scalar(s / T::from_f64c(x.numel() as f64)),
                    Saved::None,
                ))
            }
            Attrs::Sum => Ok((Tensor::scalar(x.data().iter().copied().sum()), Saved::None)),
            Attrs::BceWithLogits { targets } => {
                if targets.len() != x.numel() {
                    return Err(mismatch(op, x.shape(), &[targets.len()]));
                }
                let total: T = x
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &y)| z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln())
                    .sum();
                Ok((
                    Tensor::scalar(total / T::from_f64c(x.numel() as f64)),
                    Saved::None,
                ))
            }
            Attrs::SoftmaxCrossEntropy { labels } => {
                let (n, c) = match x.shape() {
                    [n, c] => (*n, *c),
                    _ => return Err(mismatch(op, x.shape(), &[labels.len()])),
                };
                if labels.len() != n {
                    return Err(mismatch(op, x.shape(), &[labels.len()]));
                }
                if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
                    return Err(Error::LabelOutOfRange {
                        label: bad,
                        classes: c,
                    });
                }
                let mut probs = vec![T::zero(); n * c];
                let mut total = T::zero();
                for (s, row) in x.data().chunks(c).enumerate() {
                    let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
                    for (j, &v) in row.iter().enumerate() {
                        probs[s * c + j] = (v - mx).exp() / z;
                    }
                    total = total + (z.ln() + mx - row[labels[s]]);
                }
                Ok((
                    Tensor::scalar(total / T::from_f64c(n as f64)),
                    Saved::Probs(probs),
                ))
            }
            Attrs::L2Distance => {
                let y = self.value(inputs[1]);
                if x.shape() != y.shape() {
                    return Err(mismatch(op, x.shape(), y.shape()));
                }
                let s: T = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&a, &b)| (a - b) * (a - b))
                    .sum();
                Ok((
                    Tensor::scalar(s / T::from_f64c(x.numel() as f64)),
                    Saved::None,
                ))
            }
            Attrs::Reshape(shape) => {
                let t = x
                    .clone()
                    .reshape(shape.clone())
                    .map_err(|_| mismatch(op, x.shape(), shape))?;
                Ok((t, Saved::None))
            }
            Attrs::Narrow { axis, start, len } => {
                let s = x.shape();
                if *axis >= s.len() || *len == 0 || start + len > s[*axis] {
                    return Err(mismatch(op, s, &[*axis, *start, *len]));
                }
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut out = Vec::with_capacity(outer * len * inner);
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    out.extend_from_slice(&x.data()[base..base + len * inner]);
                }
                let mut shape = s.to_vec();
                shape[*axis] = *len;
                Ok((Tensor::new(shape, out)?, Saved::None))
            }
            Attrs::AddRowBias => {
                let b = self.value(inputs[1]);
                let f = match (x.shape(), b.shape()) {
                    ([_, f], [f2]) if f == f2 => *f,
                    _ => return Err(mismatch(op, x.shape(), b.shape())),
                };
                let mut out = x.data().to_vec();
                for row in out.chunks_mut(f) {
                    add_into(row, b.data());
                }
                Ok((Tensor::new(x.shape().to_vec(), out)?, Saved::None))
            }
            Attrs::GlobalAvgPool => {
                let (n, c, h, w) = dims4(op, x.shape())?;
                let inv = T::one() / T::from_f64c((h * w) as f64);
                let out = x
                    .data()
                    .chunks(h * w)
                    .map(|p| p.iter().copied().sum::<T>() * inv)
                    .collect();
                Ok((Tensor::new([n, c], out)?, Saved::None))
            }
            Attrs::SoftBoxMask {
                half_w,
                half_h,
                k,
                height,
                width,
            } => {
                let n = match x.shape() {
                    [n, 2] => *n,
                    _ => return Err(mismatch(op, x.shape(), &[2])),
                };
                if *k <= T::zero() {
                    return Err(Error::Config("mask sharpness k must be positive".into()));
                }
                let mut out = Vec::with_capacity(n * height * width);
                for s in 0..n {
                    let (cx, cy) = (x.data()[2 * s], x.data()[2 * s + 1]);
                    let mx = window(*width, cx, *half_w, *k);
                    let my = window(*height, cy, *half_h, *k);
                    for &vy in &my {
                        out.extend(mx.iter().map(|&vx| vy * vx));
                    }
                }
                Ok((Tensor::new([n, 1, *height, *width], out)?, Saved::None))
            }
        }
    }

    /// Populates gradients of the scalar `loss` for every reachable node that
    /// requires them. Intermediate gradients are dropped after use; leaf
    /// gradients stay readable through [`Tape::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let loss_shape = lv.shape().to_vec();
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::full(loss_shape, T::one()));
        for i in (0..=loss.0).rev() {
            if self.nodes[i].record.is_none() {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            let contributions = self.backward_rule(i, &g);
            let node = &self.nodes[i];
            let inputs = &node.record.as_ref().expect("checked above").1;
            for (v, dv) in inputs.iter().zip(contributions) {
                let Some(dv) = dv else { continue };
                if !self.nodes[v.0].requires_grad {
                    continue;
                }
                match &mut self.grads[v.0] {
                    Some(acc) => add_into(acc.data_mut(), dv.data()),
                    slot @ None => *slot = Some(dv),
                }
            }
        }
        Ok(())
    }

    fn backward_rule(&self, i: usize, g: &Tensor<T>) -> Vec<Option<Tensor<T>>> {
        let node = &self.nodes[i];
        let (attrs, inputs, saved) = node.record.as_ref().expect("non-leaf");
        let gd = g.data();
        let x = self.value(inputs[0]);
        let want = |k: usize| self.nodes[inputs[k].0].requires_grad;
        let like = |t: &Tensor<T>, data: Vec<T>| {
            Some(Tensor::new(t.shape().to_vec(), data).expect("same shape"))
        };
        let elementwise = |f: &dyn Fn(usize) -> T| like(x, (0..x.numel()).map(f).collect());
        match attrs {
            Attrs::Add | Attrs::Sub | Attrs::Mul => {
                let y = self.value(inputs[1]);
                let sign = if matches!(attrs, Attrs::Sub) {
                    -T::one()
                } else {
                    T::one()
                };
                let bx = x.numel() == 1 && y.numel() != 1;
                let by = y.numel() == 1 && x.numel() != 1;
                let at = |t: &Tensor<T>, j: usize, bcast: bool| {
                    if bcast {
                        t.item()
                    } else {
                        t.data()[j]
                    }
                };
                let dx: Vec<T> = (0..gd.len())
                    .map(|j| match attrs {
                        Attrs::Mul => gd[j] * at(y, j, by),
                        _ => gd[j],
                    })
                    .collect();
                let dy: Vec<T> = (0..gd.len())
                    .map(|j| match attrs {
                        Attrs::Mul => gd[j] * at(x, j, bx),
                        _ => gd[j] * sign,
                    })
                    .collect();
                let reduce = |t: &Tensor<T>, d: Vec<T>, bcast: bool| {
                    if bcast {
                        like(t, vec![d.into_iter().sum()])
                    } else {
                        like(t, d)
                    }
                };
                vec![reduce(x, dx, bx), reduce(y, dy, by)]
            }
            Attrs::Matmul => {
                let y = self.value(inputs[1]);
                let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
                let dx = want(0).then(|| {
                    let mut d = vec![T::zero(); m * k];
                    kernels::gemm_nt_acc(m, k, n, gd, y.data(), &mut d);
                    d
                });
                let dy = want(1).then(|| {
                    let mut d = vec![T::zero(); k * n];
                    kernels::gemm_tn_acc(m, k, n, x.data(), gd, &mut d);
                    d
                });
                vec![dx.and_then(|d| like(x, d)), dy.and_then(|d| like(y, d))]
            }
            Attrs::Conv2d { .. } => {
                let Saved::Conv(geom, n) = saved else {
                    unreachable!()
                };
                let w = self.value(inputs[1]);
                let b = self.value(inputs[2]);
                let (dx, dw, db) =
                    kernels::conv2d_backward(self.exec, geom, *n, x.data(), w.data(), gd);
                vec![like(x, dx), like(w, dw), like(b, db)]
            }
            Attrs::NearestUpsample2x => {
                let (_, _, h, w) = dims4(OpId::NearestUpsample2x, x.shape()).expect("checked");
                let (h2, w2) = (2 * h, 2 * w);
                let mut dx = vec![T::zero(); x.numel()];
                for (p, plane) in dx.chunks_mut(h * w).enumerate() {
                    let src = &gd[p * h2 * w2..(p + 1) * h2 * w2];
                    for y in 0..h2 {
                        for xx in 0..w2 {
                            let d = &mut plane[(y / 2) * w + xx / 2];
                            *d = *d + src[y * w2 + xx];
                        }
                    }
                }
                vec![like(x, dx)]
            }
            Attrs::Relu => vec![elementwise(&|j| {
                if x.data()[j] > T::zero() {
                    gd[j]
                } else {
                    T::zero()
                }
            })],
            Attrs::Sigmoid => {
                let y = node.value.data();
                vec![elementwise(&|j| gd[j] * y[j] * (T::one() - y[j]))]
            }
            Attrs::Tanh => {
                let y = node.value.data();
                vec![elementwise(&|j| gd[j] * (T::one() - y[j] * y[j]))]
            }
            Attrs::Square => {
                let two = T::from_f64c(2.0);
                vec![elementwise(&|j| gd[j] * two * x.data()[j])]
            }
            Attrs::Scale(c) => vec![elementwise(&|j| gd[j] * *c)],
            Attrs::AddScalar(_) => vec![elementwise(&|j| gd[j])],
            Attrs::BatchNorm2d(mode) => {
                let Saved::BatchNorm { xhat, inv_std, .. } = saved else {
                    unreachable!()
                };
                let gamma = self.value(inputs[1]);
                let beta = self.value(inputs[2]);
                let (n, c, h, w) = dims4(OpId::BatchNorm2d, x.shape()).expect("checked");
                let plane = h * w;
                let m = T::from_f64c((n * plane) as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut dx = vec![T::zero(); x.numel()];
                for ch in 0..c {
                    let idx = || {
                        (0..n).flat_map(move |s| {
                            let off = (s * c + ch) * plane;
                            off..off + plane
                        })
                    };
                    let gam = gamma.data()[ch];
                    let (mut sg, mut sgx) = (T::zero(), T::zero());
                    for i in idx() {
                        sg = sg + gd[i];
                        sgx = sgx + gd[i] * xhat[i];
                    }
                    dbeta[ch] = sg;
                    dgamma[ch] = sgx;
                    match mode {
                        BnMode::Train { .. } => {
                            // dxhat = g·gamma, so its sums are gamma·sg and gamma·sgx.
                            let k = inv_std[ch] / m;
                            for i in idx() {
                                dx[i] = k * (m * gd[i] * gam - gam * sg - xhat[i] * gam * sgx);
                            }
                        }
                        BnMode::Eval { .. } => {
                            for i in idx() {
                                dx[i] = gd[i] * gam * inv_std[ch];
                            }
                        }
                    }
                }
                vec![like(x, dx), like(gamma, dgamma), like(beta, dbeta)]
            }
            Attrs::ConcatChannels => {
                let Saved::Channels(channels) = saved else {
                    unreachable!()
                };
                let (n, total, h, w) =
                    dims4(OpId::ConcatChannels, node.value.shape()).expect("checked");
                let plane = h * w;
                let mut offset = 0;
                let mut out = Vec::with_capacity(inputs.len());
                for (&v, &c) in inputs.iter().zip(channels) {
                    let mut d = Vec::with_capacity(n * c * plane);
                    for s in 0..n {
                        let base = (s * total + offset) * plane;
                        d.extend_from_slice(&gd[base..base + c * plane]);
                    }
                    offset += c;
                    out.push(like(self.value(v), d));
                }
                out
            }
            Attrs::Mean => {
                let s = g.item() / T::from_f64c(x.numel() as f64);
                vec![like(x, vec![s; x.numel()])]
            }
            Attrs::Sum => vec![like(x, vec![g.item(); x.numel()])],
            Attrs::BceWithLogits { targets } => {
                let s = g.item() / T::from_f64c(x.numel() as f64);
                vec![elementwise(&|j| (sigmoid(x.data()[j]) - targets[j]) * s)]
            }
            Attrs::SoftmaxCrossEntropy { labels } => {
                let Saved::Probs(probs) = saved else {
                    unreachable!()
                };
                let c = x.shape()[1];
                let s = g.item() / T::from_f64c(labels.len() as f64);
                let mut d: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (row, &l) in labels.iter().enumerate() {
                    d[row * c + l] = d[row * c + l] - s;
                }
                vec![like(x, d)]
            }
            Attrs::L2Distance => {
                let y = self.value(inputs[1]);
                let s = g.item() * T::from_f64c(2.0 / x.numel() as f64);
                let dx: Vec<T> = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&a, &b)| (a - b) * s)
                    .collect();
                let dy: Vec<T> = dx.iter().map(|&v| -v).collect();
                vec![like(x, dx), like(y, dy)]
            }
            Attrs::Reshape(_) => vec![like(x, gd.to_vec())],
            Attrs::Narrow { axis, start, len } => {
                let s = x.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[axis + 1..].iter().product();
                let mut dx = vec![T::zero(); x.numel()];
                for o in 0..outer {
                    let base = (o * s[*axis] + start) * inner;
                    dx[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![like(x, dx)]
            }
            Attrs::AddRowBias => {
                let b = self.value(inputs[1]);
                let f = b.numel();
                let mut db = vec![T::zero(); f];
                for row in gd.chunks(f) {
                    add_into(&mut db, row);
                }
                vec![like(x, gd.to_vec()), like(b, db)]
            }
            Attrs::GlobalAvgPool => {
                let plane = x.numel() / gd.len();
                let inv = T::one() / T::from_f64c(plane as f64);
                vec![elementwise(&|j| gd[j / plane] * inv)]
            }
            Attrs::SoftBoxMask {
                half_w,
                half_h,
                k,
                height,
                width,
            } => {
                let n = x.shape()[0];
                let mut d = vec![T::zero(); 2 * n];
                for s in 0..n {
                    let (cx, cy) = (x.data()[2 * s], x.data()[2 * s + 1]);
                    let mx = window(*width, cx, *half_w, *k);
                    let my = window(*height, cy, *half_h, *k);
                    let dmx = window_dcenter(*width, cx, *half_w, *k);
                    let dmy = window_dcenter(*height, cy, *half_h, *k);
                    let gs = &gd[s * height * width..(s + 1) * height * width];
                    let (mut dcx, mut dcy) = (T::zero(), T::zero());
                    for yy in 0..*height {
                        for xx in 0..*width {
                            let gv = gs[yy * width + xx];
                            dcx = dcx + gv * my[yy] * dmx[xx];
                            dcy = dcy + gv * dmy[yy] * mx[xx];
                        }
                    }
                    d[2 * s] = dcx;
                    d[2 * s + 1] = dcy;
                }
                vec![like(x, d)]
            }
        }
    }

    // Convenience wrappers.

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Attrs::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Attrs::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Attrs::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Attrs::Matmul, &[a, b])
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        self.apply(Attrs::Conv2d { stride }, &[x, w, b])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        self.apply(Attrs::NearestUpsample2x, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.apply(Attrs::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.apply(Attrs::Sigmoid, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.apply(Attrs::Tanh, &[x])
    }

    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<T>) -> Result<Var> {
        self.apply(Attrs::BatchNorm2d(mode), &[x, gamma, beta])
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        self.apply(Attrs::ConcatChannels, xs)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.apply(Attrs::Mean, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.apply(Attrs::Sum, &[x])
    }

    pub fn bce_with_logits(&mut self, logits: Var, targets: Vec<T>) -> Result<Var> {
        self.apply(Attrs::BceWithLogits { targets }, &[logits])
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Result<Var> {
        self.apply(Attrs::SoftmaxCrossEntropy { labels }, &[logits])
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.apply(Attrs::Square, &[x])
    }

    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Attrs::L2Distance, &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.apply(Attrs::Scale(c), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Result<Var> {
        self.apply(Attrs::AddScalar(c), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        self.apply(Attrs::Reshape(shape.into()), &[x])
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.apply(Attrs::Narrow { axis, start, len }, &[x])
    }

    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.apply(Attrs::AddRowBias, &[x, b])
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        self.apply(Attrs::GlobalAvgPool, &[x])
    }

    /// Flattens all but the leading axis.
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let n = s[0];
        let rest = s[1..].iter().product::<usize>();
        self.reshape(x, [n, rest])
    }
}

/// One axis of the soft box: `σ(k(p − (c − half))) − σ(k(p − (c + half)))`
/// at integer pixel coordinates `p`.
pub(crate) fn window<T: Real>(len: usize, center: T, half: T, k: T) -> Vec<T> {
    (0..len)
        .map(|p| {
            let p = T::from_f64c(p as f64);
            sigmoid(k * (p - (center - half))) - sigmoid(k * (p - (center + half)))
        })
        .collect()
}

fn window_dcenter<T: Real>(len: usize, center: T, half: T, k: T) -> Vec<T> {
    (0..len)
        .map(|p| {
            let p = T::from_f64c(p as f64);
            let a = sigmoid(k * (p - (center - half)));
            let b = sigmoid(k * (p - (center + half)));
            k * (b * (T::one() - b) - a * (T::one() - a))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), v).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).item(), 0.5);
    }

    #[test]
    fn conv_interior_of_ones_is_nine() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::ones([1, 1, 5, 5]));
        let w = tape.constant(Tensor::ones([1, 1, 3, 3]));
        let b = tape.constant(Tensor::zeros([1]));
        let y = tape.conv2d(x, w, b, 1).unwrap();
        let v = tape.value(y);
        assert_eq!(v.shape(), &[1, 1, 5, 5]);
        assert_eq!(v.data()[2 * 5 + 2], 9.0);
        assert_eq!(v.data()[0], 4.0);
    }

    #[test]
    fn self_product_sum() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.mul(x, x).unwrap();
        let s = tape.sum(y).unwrap();
        assert_eq!(tape.value(s).item(), 14.0);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn square_sum_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 3.0]));
        let y = tape.square(x).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(0.0));
        let y = tape.sigmoid(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap().item(), 0.25);
    }

    #[test]
    fn bce_gradient_at_zero_logit() {
        // d/dz −log σ(z) = σ(z) − 1 = −0.5 at z = 0
        let mut tape = Tape::<f64>::new();
        let z = tape.param(t(&[1], &[0.0]));
        let l = tape.bce_with_logits(z, vec![1.0]).unwrap();
        assert!((tape.value(l).item() - std::f64::consts::LN_2).abs() < 1e-15);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(z).unwrap().data(), &[-0.5]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.square(x).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3]));
        let b = tape.constant(Tensor::zeros([2, 2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("add"), "{err}");
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
        let err = tape.matmul(a, a).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
    }

    #[test]
    fn scalar_broadcast_in_binary_ops() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let c = tape.param(Tensor::scalar(2.0));
        let y = tape.mul(x, c).unwrap();
        let s = tape.sum(y).unwrap();
        tape.backward(s).unwrap();
        assert_eq!(tape.value(s).item(), 12.0);
        assert_eq!(tape.grad(c).unwrap().item(), 6.0);
        assert_eq!(tape.grad(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn batchnorm_normalizes_per_channel() {
        let mut tape = Tape::<f64>::new();
        let data: Vec<f64> = (0..2 * 3 * 4 * 4)
            .map(|i| ((i * 7919) % 97) as f64 * 0.37 - 5.0)
            .collect();
        let x = tape.constant(t(&[2, 3, 4, 4], &data));
        let g = tape.constant(Tensor::ones([3]));
        let b = tape.constant(Tensor::zeros([3]));
        let y = tape
            .batchnorm2d(x, g, b, BnMode::Train { eps: 1e-5 })
            .unwrap();
        let v = tape.value(y).data();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|s| v[(s * 3 + ch) * 16..(s * 3 + ch + 1) * 16].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-4);
        }
        assert!(tape.batch_stats(y).is_some());
    }

    #[test]
    fn detach_stops_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.square(x).unwrap();
        let yd = tape.detach(y);
        let z = tape.mul(yd, x).unwrap();
        let s = tape.sum(z).unwrap();
        tape.backward(s).unwrap();
        // only the direct path through x contributes: d/dx (c·x) = c = x²
        assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 4.0]);
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let run = || {
            let mut tape = Tape::<f32>::new();
            let x = tape.constant(
                Tensor::new([2, 2, 4, 4], (0..64).map(|i| (i as f32).sin()).collect()).unwrap(),
            );
            let w = tape.constant(
                Tensor::new(
                    [3, 2, 3, 3],
                    (0..54).map(|i| (i as f32 * 0.3).cos()).collect(),
                )
                .unwrap(),
            );
            let b = tape.constant(Tensor::zeros([3]));
            let y = tape.conv2d(x, w, b, 2).unwrap();
            let y = tape.tanh(y).unwrap();
            tape.value(y).clone()
        };
        assert_eq!(run(), run());
    }
}
