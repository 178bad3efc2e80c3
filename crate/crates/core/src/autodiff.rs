//! Reverse-mode differentiation over a recorded operation tape.
//!
//! A [`Tape`] owns every intermediate value of one forward pass. Ops append
//! nodes and return [`Var`] handles; [`Tape::backward`] consumes the tape,
//! walks it once in reverse and returns the gradients of all leaves. A tape
//! is confined to one thread.

use crate::error::{shape_err, Error, Result};
use crate::grid::GridSpec;
use crate::kernels;
use crate::loss::{self, LossConfig};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};
use crate::warp::{self, DisplacementField};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kinds of recorded operations, used for diagnostics and fault injection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Mul,
    Scale,
    AddBias,
    MatMul,
    Relu,
    Gelu,
    Conv2d,
    MaxPool2,
    Upsample2,
    Softmax,
    Attention,
    ChannelPairMean,
    Warp,
    BceDice,
    Sum,
    WeightedSum,
}

impl OpKind {
    pub fn parse(name: &str) -> Option<OpKind> {
        use OpKind::*;
        Some(match name {
            "add" => Add,
            "mul" => Mul,
            "scale" => Scale,
            "add_bias" => AddBias,
            "matmul" => MatMul,
            "relu" => Relu,
            "gelu" => Gelu,
            "conv2d" => Conv2d,
            "maxpool2" => MaxPool2,
            "upsample2" => Upsample2,
            "softmax" => Softmax,
            "attention" => Attention,
            "channel_pair_mean" => ChannelPairMean,
            "warp" => Warp,
            "bce_dice" => BceDice,
            "sum" => Sum,
            "weighted_sum" => WeightedSum,
            _ => return None,
        })
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Relu(Var),
    Gelu(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, spec: GridSpec },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2(Var),
    Softmax(Var),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<T> },
    ChannelPairMean(Var),
    Warp { x: Var, field: Var },
    BceDice { logits: Var, targets: Tensor<T>, cfg: LossConfig },
    Sum(Var),
    WeightedSum(Var, Tensor<T>),
}

impl<T> Op<T> {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add(..) => OpKind::Add,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::AddBias(..) => OpKind::AddBias,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Relu(_) => OpKind::Relu,
            Op::Gelu(_) => OpKind::Gelu,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::MaxPool2 { .. } => OpKind::MaxPool2,
            Op::Upsample2(_) => OpKind::Upsample2,
            Op::Softmax(_) => OpKind::Softmax,
            Op::Attention { .. } => OpKind::Attention,
            Op::ChannelPairMean(_) => OpKind::ChannelPairMean,
            Op::Warp { .. } => OpKind::Warp,
            Op::BceDice { .. } => OpKind::BceDice,
            Op::Sum(_) => OpKind::Sum,
            Op::WeightedSum(..) => OpKind::WeightedSum,
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    sign_flip: Option<OpKind>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), sign_flip: None }
    }

    /// Negates every gradient produced by backward rules of `kind`. Only
    /// meant for mutation tests of the gradient checker.
    pub fn inject_sign_flip(&mut self, kind: OpKind) {
        self.sign_flip = Some(kind);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    /// Operation kinds in recording order.
    pub fn op_kinds(&self) -> Vec<OpKind> {
        self.nodes.iter().map(|n| n.op.kind()).collect()
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(format!("operand shapes differ: {} vs {}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o += *v;
        }
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= *v;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|v| v * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = kernels::add_bias(self.value(x), self.value(bias))?;
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(x), self.value(w))?;
        Ok(self.push(out, Op::MatMul(x, w)))
    }

    /// `x W + b` over the channel axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = kernels::relu(self.value(x));
        self.push(out, Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = kernels::gelu(self.value(x));
        self.push(out, Op::Gelu(x))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: GridSpec) -> Result<Var> {
        let out = kernels::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), spec)?;
        Ok(self.push(out, Op::Conv2d { x, w, b, spec }))
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2(self.value(x))?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }))
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let out = kernels::upsample_bilinear2(self.value(x));
        self.push(out, Op::Upsample2(x))
    }

    pub fn softmax_lastdim(&mut self, x: Var) -> Var {
        let out = kernels::softmax_lastdim(self.value(x));
        self.push(out, Op::Softmax(x))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (out, probs) = kernels::attention(self.value(q), self.value(k), self.value(v), heads)?;
        Ok(self.push(out, Op::Attention { q, k, v, heads, probs }))
    }

    pub fn channel_pair_mean(&mut self, x: Var) -> Result<Var> {
        let out = kernels::channel_pair_mean(self.value(x))?;
        Ok(self.push(out, Op::ChannelPairMean(x)))
    }

    /// Warps `x` by the `B×H×W×2` field held in `field`.
    pub fn warp(&mut self, x: Var, field: Var) -> Result<Var> {
        let f = DisplacementField::new(self.value(field).clone())?;
        let out = warp::warp(self.value(x), &f)?;
        Ok(self.push(out, Op::Warp { x, field }))
    }

    pub fn bce_dice(&mut self, logits: Var, targets: &Tensor<T>, cfg: LossConfig) -> Result<Var> {
        let value = loss::bce_dice_value(self.value(logits), targets, &cfg)?;
        let out = Tensor::full(Shape::new(1, 1, 1, 1), value);
        Ok(self.push(out, Op::BceDice { logits, targets: targets.clone(), cfg }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Tensor::full(Shape::new(1, 1, 1, 1), self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    /// `Σ x ⊙ weights` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        if weights.shape() != self.shape(x) {
            return shape_err(format!("weights {} do not match {}", weights.shape(), self.shape(x)));
        }
        let s: T = self.value(x).data().iter().zip(weights.data()).map(|(a, b)| *a * *b).sum();
        let out = Tensor::full(Shape::new(1, 1, 1, 1), s);
        Ok(self.push(out, Op::WeightedSum(x, weights)))
    }

    /// Consumes the tape and returns the gradient of the scalar `loss` with
    /// respect to every leaf reached from it.
    pub fn backward(mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar, got {}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        let flip = self.sign_flip;
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = std::mem::replace(
                &mut self.nodes[idx],
                Node { value: Tensor::zeros(Shape::default()), op: Op::Leaf },
            );
            if let Op::Leaf = node.op {
                grads[idx] = Some(g);
                continue;
            }
            let negate = flip == Some(node.op.kind());
            let contributions = self.rule(node, &g)?;
            for (var, mut t) in contributions {
                if negate {
                    t = t.map(|v| -v);
                }
                accumulate(&mut grads[var.0], t);
            }
        }
        Ok(Gradients { grads })
    }

    fn rule(&self, node: Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        Ok(match node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(a, g.clone()), (b, g.clone())],
            Op::Mul(a, b) => {
                let ga = zip_map(g, val(b), |g, y| g * y);
                let gb = zip_map(g, val(a), |g, x| g * x);
                vec![(a, ga), (b, gb)]
            }
            Op::Scale(a, s) => vec![(a, g.map(|v| v * s))],
            Op::AddBias(x, b) => {
                let gb = kernels::bias_backward(g, val(b).shape());
                vec![(x, g.clone()), (b, gb)]
            }
            Op::MatMul(x, w) => {
                let (gx, gw) = kernels::matmul_backward(g, val(x), val(w));
                vec![(x, gx), (w, gw)]
            }
            Op::Relu(x) => vec![(x, zip_map(g, val(x), |g, v| if v > T::zero() { g } else { T::zero() }))],
            Op::Gelu(x) => vec![(x, zip_map(g, val(x), |g, v| g * kernels::gelu_derivative(v)))],
            Op::Conv2d { x, w, b, spec } => {
                let (gx, gw) = kernels::conv2d_backward(g, val(x), val(w), spec);
                let mut out = vec![(x, gx), (w, gw)];
                if let Some(b) = b {
                    out.push((b, kernels::bias_backward(g, val(b).shape())));
                }
                out
            }
            Op::MaxPool2 { x, argmax } => vec![(x, kernels::maxpool2_backward(g, &argmax, val(x).shape()))],
            Op::Upsample2(x) => vec![(x, kernels::upsample_bilinear2_backward(g, val(x).shape()))],
            Op::Softmax(x) => vec![(x, kernels::softmax_lastdim_backward(g, &node.value))],
            Op::Attention { q, k, v, heads, probs } => {
                let (gq, gk, gv) = kernels::attention_backward(g, val(q), val(k), val(v), &probs, heads);
                vec![(q, gq), (k, gk), (v, gv)]
            }
            Op::ChannelPairMean(x) => vec![(x, kernels::channel_pair_mean_backward(g, val(x).shape()))],
            Op::Warp { x, field } => {
                let f = DisplacementField::new(val(field).clone())?;
                let (gx, gf) = warp::warp_backward(g, val(x), &f)?;
                vec![(x, gx), (field, gf)]
            }
            Op::BceDice { logits, targets, cfg } => {
                let s = g.data()[0];
                let gl = loss::bce_dice_grad(val(logits), &targets, &cfg)?.map(|v| v * s);
                vec![(logits, gl)]
            }
            Op::Sum(x) => vec![(x, Tensor::full(val(x).shape(), g.data()[0]))],
            Op::WeightedSum(x, w) => {
                let s = g.data()[0];
                vec![(x, w.map(|v| v * s))]
            }
        })
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data).expect("zip of equal shapes")
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, t: Tensor<T>) {
    match slot {
        Some(acc) => {
            for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
                *a += *v;
            }
        }
        None => *slot = Some(t),
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Gradient of `v`, or zeros of `shape` when `v` was not reached.
    pub fn take_or_zeros(&mut self, v: Var, shape: Shape) -> Tensor<T> {
        self.take(v).unwrap_or_else(|| Tensor::zeros(shape))
    }
}
