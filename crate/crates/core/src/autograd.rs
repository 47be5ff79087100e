//! Reverse-mode differentiation over a recorded tape.
//!
//! A [`Graph`] is an append-only list of nodes. Every operation evaluates
//! eagerly, stores its output, and records enough context to run its
//! backward rule later. Node ids are handed out in evaluation order, so the
//! list is already topologically sorted and [`Graph::backward`] is a single
//! reverse sweep.

use crate::error::{contract, shape_err, Error, Result};
use crate::nn::{self, BnCache};
use crate::tensor::{gemm_abt_acc, gemm_atb_acc, BinaryOp, Float, ReduceKind, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Deliberate backward-rule corruption, used to show the gradient checker
/// notices broken rules.
#[doc(hidden)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Scales the sigmoid derivative by 1.01.
    SigmoidSlope,
}

enum Op<T> {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Affine(Var, T),
    MatMul(Var, Var),
    Bmm(Var, Var),
    TransposeLast2(Var),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Narrow { x: Var, axis: usize, start: usize },
    SumAxis(Var),
    MaxAxis { x: Var, axis: usize, arg: Vec<usize> },
    SumAll(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    AvgPool2d(Var),
    SeqPool(Var),
    Resize(Var),
    Softmax(Var, usize),
    Sigmoid(Var),
    Relu(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, cache: BnCache<T>, batch_stats: bool },
    Bce { pred: Var, target: Tensor<T>, clamp: f64 },
    Dice { pred: Var, target: Tensor<T>, smooth: f64 },
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    is_param: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    fault: Fault,
}

impl<T: Float> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], kept for leaf and parameter
/// nodes.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<Var>,
}

impl<T: Float> Gradients<T> {
    /// Gradient of a leaf or parameter; `None` when the loss does not depend
    /// on it.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Iterates `(parameter, gradient)` for every parameter the loss touches.
    pub fn params(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.params.iter().filter_map(|&v| self.get(v).map(|g| (v, g)))
    }
}

impl<T: Float> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: Fault::None,
        }
    }

    #[doc(hidden)]
    pub fn set_fault(&mut self, fault: Fault) {
        self.fault = fault;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        self.nodes.push(Node {
            op,
            value,
            is_param: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input (no gradient is reported unless asked for).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(Op::Leaf, t)
    }

    /// A trainable parameter. Callers should register each parameter once.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        let v = self.push(Op::Leaf, t);
        self.nodes[v.0].is_param = true;
        v
    }

    pub fn is_param(&self, v: Var) -> bool {
        self.nodes[v.0].is_param
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // -- elementwise ------------------------------------------------------

    pub fn binary(&mut self, a: Var, b: Var, op: BinaryOp) -> Result<Var> {
        let out = self.value(a).binary(self.value(b), op)?;
        Ok(self.push(Op::Binary(op, a, b), out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, BinaryOp::Mul)
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::of(scale), T::of(shift));
        let out = self.value(x).map(|v| s * v + c);
        self.push(Op::Affine(x, s), out)
    }

    /// `1 - x`, computed exactly as one subtraction per element.
    pub fn one_minus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| T::one() - v);
        self.push(Op::Affine(x, -T::one()), out)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = nn::activation(self.value(x), nn::Activation::Sigmoid);
        self.push(Op::Sigmoid(x), out)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = nn::activation(self.value(x), nn::Activation::Relu);
        self.push(Op::Relu(x), out)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = nn::softmax(self.value(x), axis)?;
        Ok(self.push(Op::Softmax(x, axis), out))
    }

    // -- linear algebra and layout ---------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).bmm(self.value(b))?;
        Ok(self.push(Op::Bmm(a, b), out))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose_last2()?;
        Ok(self.push(Op::TransposeLast2(x), out))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(Op::Reshape(x), out))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let refs: Vec<&Tensor<T>> = xs.iter().map(|&v| self.value(v)).collect();
        let out = Tensor::concat(&refs, axis)?;
        Ok(self.push(Op::Concat(xs.to_vec(), axis), out))
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = self.value(x).narrow(axis, start, len)?;
        Ok(self.push(Op::Narrow { x, axis, start }, out))
    }

    // -- reductions -------------------------------------------------------

    /// Sum over one axis, kept with size 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis >= self.value(x).ndim() {
            return Err(shape_err!("axis {axis} out of range for {:?}", self.shape(x)));
        }
        let (out, _) = self.value(x).reduce_axis(axis, ReduceKind::Sum);
        Ok(self.push(Op::SumAxis(x), out))
    }

    /// Mean over the given axes, each kept with size 1.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let mut cur = x;
        let mut count = 1usize;
        for &a in axes {
            count *= self.shape(x).get(a).copied().unwrap_or(1);
            cur = self.sum_axis(cur, a)?;
        }
        Ok(self.affine(cur, 1.0 / count as f64, 0.0))
    }

    /// Max over one axis, kept with size 1. The gradient goes to the first
    /// maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        if axis >= self.value(x).ndim() {
            return Err(shape_err!("axis {axis} out of range for {:?}", self.shape(x)));
        }
        let (out, arg) = self.value(x).reduce_axis(axis, ReduceKind::Max);
        let arg = arg.expect("max reduction yields argmax");
        Ok(self.push(Op::MaxAxis { x, axis, arg }, out))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum_all());
        self.push(Op::SumAll(x), out)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.affine(s, 1.0 / n as f64, 0.0)
    }

    // -- layers -----------------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let out = nn::conv2d_raw(self.value(x), self.value(w), b.map(|b| self.value(b)), stride, pad)?;
        Ok(self.push(Op::Conv2d { x, w, b, stride, pad }, out))
    }

    pub fn avg_pool2d(&mut self, x: Var) -> Result<Var> {
        let out = nn::avg_pool2d(self.value(x))?;
        Ok(self.push(Op::AvgPool2d(x), out))
    }

    pub fn seq_pool(&mut self, x: Var, target: usize) -> Result<Var> {
        let out = nn::adaptive_avg_pool_seq(self.value(x), target)?;
        Ok(self.push(Op::SeqPool(x), out))
    }

    pub fn resize(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let out = nn::bilinear_resize(self.value(x), h, w)?;
        Ok(self.push(Op::Resize(x), out))
    }

    /// Batch norm with per-channel statistics supplied by the caller
    /// (`batch_stats` marks them as functions of `x`).
    pub(crate) fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: (&[T], &[T]),
        eps: f64,
        batch_stats: bool,
    ) -> Result<Var> {
        let (out, cache) = nn::bn_apply(self.value(x), stats.0, stats.1, self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                batch_stats,
            },
            out,
        ))
    }

    // -- losses -----------------------------------------------------------

    /// Mean binary cross-entropy with predictions clamped to `[clamp, 1-clamp]`.
    pub fn bce(&mut self, pred: Var, target: &Tensor<T>, clamp: f64) -> Result<Var> {
        let loss = crate::train::loss::bce_value(self.value(pred), target, clamp)?;
        Ok(self.push(
            Op::Bce {
                pred,
                target: target.clone(),
                clamp,
            },
            Tensor::scalar(loss),
        ))
    }

    /// Soft Dice loss `1 - (2Σpg + s)/(Σp + Σg + s)`.
    pub fn dice(&mut self, pred: Var, target: &Tensor<T>, smooth: f64) -> Result<Var> {
        let loss = crate::train::loss::dice_value(self.value(pred), target, smooth)?;
        Ok(self.push(
            Op::Dice {
                pred,
                target: target.clone(),
                smooth,
            },
            Tensor::scalar(loss),
        ))
    }

    // -- reverse sweep ----------------------------------------------------

    /// Gradients of the scalar node `loss` with respect to every leaf and
    /// parameter it depends on, accumulated over all use sites.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        contract!(
            self.value(loss).len() == 1,
            "backward needs a scalar loss, got shape {:?}",
            self.shape(loss)
        );
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one())?);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gin) in self.local_grads(node, &g)? {
                accumulate(&mut grads, input, gin)?;
            }
        }
        let params = (0..self.nodes.len())
            .filter(|&i| self.nodes[i].is_param)
            .map(Var)
            .collect();
        Ok(Gradients { grads, params })
    }

    fn local_grads(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let val = |v: Var| self.value(v);
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Binary(op, a, b) => {
                let (sa, sb) = (val(*a).shape(), val(*b).shape());
                match op {
                    BinaryOp::Add => vec![(*a, g.sum_to_shape(sa)?), (*b, g.sum_to_shape(sb)?)],
                    BinaryOp::Sub => vec![
                        (*a, g.sum_to_shape(sa)?),
                        (*b, g.scale(-T::one()).sum_to_shape(sb)?),
                    ],
                    BinaryOp::Mul => vec![
                        (*a, g.mul(val(*b))?.sum_to_shape(sa)?),
                        (*b, g.mul(val(*a))?.sum_to_shape(sb)?),
                    ],
                }
            }
            Op::Affine(x, s) => vec![(*x, g.scale(*s))],
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).dims2()?.1;
                let mut ga = vec![T::zero(); m * k];
                gemm_abt_acc(g.data(), val(*b).data(), &mut ga, m, n, k);
                let mut gb = vec![T::zero(); k * n];
                gemm_atb_acc(val(*a).data(), g.data(), &mut gb, k, m, n);
                vec![(*a, Tensor::new(&[m, k], ga)?), (*b, Tensor::new(&[k, n], gb)?)]
            }
            Op::Bmm(a, b) => {
                let (bs, m, k) = val(*a).dims3()?;
                let n = val(*b).dims3()?.2;
                let mut ga = vec![T::zero(); bs * m * k];
                let mut gb = vec![T::zero(); bs * k * n];
                for i in 0..bs {
                    let gi = &g.data()[i * m * n..(i + 1) * m * n];
                    gemm_abt_acc(gi, &val(*b).data()[i * k * n..(i + 1) * k * n], &mut ga[i * m * k..(i + 1) * m * k], m, n, k);
                    gemm_atb_acc(&val(*a).data()[i * m * k..(i + 1) * m * k], gi, &mut gb[i * k * n..(i + 1) * k * n], k, m, n);
                }
                vec![(*a, Tensor::new(&[bs, m, k], ga)?), (*b, Tensor::new(&[bs, k, n], gb)?)]
            }
            Op::TransposeLast2(x) => vec![(*x, g.transpose_last2()?)],
            Op::Reshape(x) => vec![(*x, g.reshape(val(*x).shape())?)],
            Op::Concat(xs, axis) => {
                let mut start = 0;
                let mut out = Vec::with_capacity(xs.len());
                for &x in xs {
                    let len = val(x).shape()[*axis];
                    out.push((x, g.narrow(*axis, start, len)?));
                    start += len;
                }
                out
            }
            Op::Narrow { x, axis, start } => {
                let full = val(*x).shape();
                let (outer, alen, inner) = crate::tensor::split_at_axis(full, *axis);
                let len = g.shape()[*axis];
                let mut dx = vec![T::zero(); val(*x).len()];
                for o in 0..outer {
                    let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                    let base = o * alen * inner + start * inner;
                    dx[base..base + len * inner].copy_from_slice(src);
                }
                vec![(*x, Tensor::new(full, dx)?)]
            }
            Op::SumAxis(x) => vec![(*x, Tensor::zeros(val(*x).shape())?.add(g)?)],
            Op::MaxAxis { x, axis, arg } => {
                let full = val(*x).shape();
                let (outer, alen, inner) = crate::tensor::split_at_axis(full, *axis);
                let mut dx = vec![T::zero(); val(*x).len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let slot = o * inner + i;
                        dx[o * alen * inner + arg[slot] * inner + i] = g.data()[slot];
                    }
                }
                vec![(*x, Tensor::new(full, dx)?)]
            }
            Op::SumAll(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item())?)],
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = nn::conv2d_backward(val(*x), val(*w), g, *stride, *pad)?;
                let mut out = vec![(*x, dx), (*w, dw)];
                if let Some(b) = b {
                    out.push((*b, db));
                }
                out
            }
            Op::AvgPool2d(x) => vec![(*x, nn::avg_pool2d_backward(g, val(*x).shape())?)],
            Op::SeqPool(x) => vec![(*x, nn::adaptive_avg_pool_seq_backward(g, val(*x).shape())?)],
            Op::Resize(x) => vec![(*x, nn::bilinear_resize_backward(g, val(*x).shape())?)],
            Op::Softmax(x, axis) => vec![(*x, nn::softmax_backward(&node.value, g, *axis)?)],
            Op::Sigmoid(x) => {
                let slope = if self.fault == Fault::SigmoidSlope { T::of(1.01) } else { T::one() };
                let d = node.value.zip_map(g, |s, gv| gv * s * (T::one() - s) * slope)?;
                vec![(*x, d)]
            }
            Op::Relu(x) => {
                let d = val(*x).zip_map(g, |v, gv| if v > T::zero() { gv } else { T::zero() })?;
                vec![(*x, d)]
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                cache,
                batch_stats,
            } => {
                let (dx, dg, db) = nn::bn_backward(cache, val(*gamma), g, *batch_stats)?;
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Bce { pred, target, clamp } => {
                let d = crate::train::loss::bce_grad(val(*pred), target, *clamp)?;
                vec![(*pred, d.scale(g.item()))]
            }
            Op::Dice { pred, target, smooth } => {
                let d = crate::train::loss::dice_grad(val(*pred), target, *smooth)?;
                vec![(*pred, d.scale(g.item()))]
            }
        })
    }
}

fn accumulate<T: Float>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => {
            if existing.shape() != g.shape() {
                return Err(Error::ShapeMismatch(format!(
                    "gradient for node {} has shape {:?}, expected {:?}",
                    v.0,
                    g.shape(),
                    existing.shape()
                )));
            }
            *existing = existing.add(&g)?;
        }
        slot @ None => *slot = Some(g),
    }
    Ok(())
}
