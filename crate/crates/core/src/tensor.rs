//! Dense row-major tensors and the elementary kernels the rest of the crate
//! builds on.
//!
//! A [`Tensor`] owns its buffer and never changes shape after construction.
//! Every kernel here returns a fresh tensor. Kernels that parallelise (only
//! [`Tensor::matmul`] and the convolution kernels in [`crate::nn`]) split work
//! over independent output rows, so results are bit-identical for any thread
//! count.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal, Uniform};
use rayon::prelude::*;

use crate::error::{contract, shape_err, Error, Result};

/// Floating point element types a [`Tensor`] may hold.
pub trait Float:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + AddAssign
    + MulAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    const PRECISION: Precision;

    fn of(v: f64) -> Self;

    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Float for f32 {
    const PRECISION: Precision = Precision::Single;

    #[inline]
    fn of(v: f64) -> Self {
        v as f32
    }
}

impl Float for f64 {
    const PRECISION: Precision = Precision::Double;

    #[inline]
    fn of(v: f64) -> Self {
        v
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Precision {
    Single,
    Double,
}

/// Distributions accepted by [`Tensor::random`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Uniform on `[-a, a]`.
    Uniform(f64),
    /// Normal with mean zero and the given standard deviation.
    Normal(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Debug> Debug for Tensor<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor{:?} [", self.shape)?;
        for (i, v) in self.data.iter().take(SHOWN).enumerate() {
            if i > 0 {
                write!(f, ", ")?;
            }
            write!(f, "{v:?}")?;
        }
        if self.data.len() > SHOWN {
            write!(f, ", ...")?;
        }
        write!(f, "]")
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn check_shape(shape: &[usize]) -> Result<()> {
    if shape.is_empty() {
        return Err(Error::InvalidShape("shape must have at least one axis".into()));
    }
    if shape.contains(&0) {
        return Err(Error::InvalidShape(format!("zero-sized axis in {shape:?}")));
    }
    Ok(())
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Shape produced by broadcasting `a` against `b` with trailing-axis alignment.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(shape_err!("cannot broadcast {a:?} against {b:?}")),
        };
    }
    Ok(out)
}

/// Strides of `shape` viewed inside `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                own[i - off]
            }
        })
        .collect()
}

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Rows per rayon task; below this a matmul stays on the calling thread.
const PAR_MIN_WORK: usize = 1 << 16;

/// `out[m×n] += a[m×k] @ b[k×n]`, all row-major slices.
pub(crate) fn gemm_acc<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (t, &av) in a_row.iter().enumerate() {
            if av == T::zero() {
                continue;
            }
            let b_row = &b[t * n..(t + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `out[m×n] += a[m×k] @ b[n×k]ᵀ`.
pub(crate) fn gemm_abt_acc<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut s = T::zero();
            for (&x, &y) in a_row.iter().zip(b_row) {
                s += x * y;
            }
            *o += s;
        }
    };
    if m * k * n >= PAR_MIN_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

/// `out[m×n] += a[k×m]ᵀ @ b[k×n]`.
pub(crate) fn gemm_atb_acc<T: Float>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    let row = |(i, out_row): (usize, &mut [T])| {
        for t in 0..k {
            let av = a[t * m + i];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in out_row.iter_mut().zip(&b[t * n..(t + 1) * n]) {
                *o += av * bv;
            }
        }
    };
    if m * k * n >= PAR_MIN_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
}

impl<T: Float> Tensor<T> {
    pub fn new(shape: &[usize], data: Vec<T>) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != data.len() {
            return Err(Error::InvalidShape(format!(
                "shape {shape:?} needs {} elements, got {}",
                numel(shape),
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Builds a tensor from `f64` values, converting to the element type.
    pub fn from_f64(shape: &[usize], data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&v| T::of(v)).collect())
    }

    pub fn full(shape: &[usize], value: T) -> Result<Self> {
        check_shape(shape)?;
        Ok(Self {
            shape: shape.to_vec(),
            data: vec![value; numel(shape)],
        })
    }

    pub fn zeros(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::zero())
    }

    pub fn ones(shape: &[usize]) -> Result<Self> {
        Self::full(shape, T::one())
    }

    pub fn scalar(v: T) -> Self {
        Self {
            shape: vec![1],
            data: vec![v],
        }
    }

    /// Deterministic random tensor; the sample stream depends only on
    /// `(shape, seed, init)` and is the same for both precisions.
    pub fn random(shape: &[usize], seed: u64, init: Init) -> Result<Self> {
        check_shape(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = numel(shape);
        let data: Vec<T> = match init {
            Init::Uniform(a) => {
                let a = a.abs();
                if a == 0.0 {
                    vec![T::zero(); n]
                } else {
                    let dist = Uniform::new_inclusive(-a, a)
                        .map_err(|e| Error::Contract(format!("uniform bounds: {e}")))?;
                    (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
                }
            }
            Init::Normal(sigma) => {
                let dist = Normal::new(0.0, sigma)
                    .map_err(|e| Error::Contract(format!("normal sigma: {e}")))?;
                (0..n).map(|_| T::of(dist.sample(&mut rng))).collect()
            }
        };
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    /// Value at a multi-index. Panics on an out-of-range index.
    pub fn at(&self, index: &[usize]) -> T {
        assert_eq!(index.len(), self.shape.len(), "index rank");
        let mut flat = 0;
        for (i, (&ix, &dim)) in index.iter().zip(&self.shape).enumerate() {
            assert!(ix < dim, "index {ix} out of range for axis {i} of {:?}", self.shape);
            flat = flat * dim + ix;
        }
        self.data[flat]
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> T {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.f64()).collect()
    }

    /// Converts element type, e.g. an `f32` model to `f64` for gradient checks.
    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::of(v.f64())).collect(),
        }
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        check_shape(shape)?;
        if numel(shape) != self.len() {
            return Err(shape_err!("cannot reshape {:?} into {shape:?}", self.shape));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Elementwise combination of two tensors of identical shape.
    pub fn zip_map(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self> {
        if self.shape != other.shape {
            return Err(shape_err!("{:?} vs {:?}", self.shape, other.shape));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Elementwise `a op b` with trailing-axis broadcasting.
    pub fn binary(&self, other: &Self, op: BinaryOp) -> Result<Self> {
        let f = match op {
            BinaryOp::Add => |a: T, b: T| a + b,
            BinaryOp::Sub => |a: T, b: T| a - b,
            BinaryOp::Mul => |a: T, b: T| a * b,
        };
        if self.shape == other.shape {
            return self.zip_map(other, f);
        }
        let out_shape = broadcast_shape(&self.shape, &other.shape)?;
        let sa = broadcast_strides(&self.shape, &out_shape);
        let sb = broadcast_strides(&other.shape, &out_shape);
        let n = numel(&out_shape);
        let rank = out_shape.len();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let (mut ia, mut ib) = (0usize, 0usize);
        for _ in 0..n {
            data.push(f(self.data[ia], other.data[ib]));
            // odometer increment
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                ia += sa[ax];
                ib += sb[ax];
                if idx[ax] < out_shape[ax] {
                    break;
                }
                ia -= sa[ax] * out_shape[ax];
                ib -= sb[ax] * out_shape[ax];
                idx[ax] = 0;
            }
        }
        Ok(Self {
            shape: out_shape,
            data,
        })
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinaryOp::Add)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinaryOp::Sub)
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.binary(other, BinaryOp::Mul)
    }

    /// Sums a broadcast result back down to `shape`, the adjoint of
    /// broadcasting `shape` up to `self.shape()`.
    pub fn sum_to_shape(&self, shape: &[usize]) -> Result<Self> {
        if self.shape == shape {
            return Ok(self.clone());
        }
        let target = broadcast_shape(shape, &self.shape)?;
        if target != self.shape {
            return Err(shape_err!("{shape:?} does not broadcast to {:?}", self.shape));
        }
        let st = broadcast_strides(shape, &self.shape);
        let rank = self.shape.len();
        let mut out = vec![T::zero(); numel(shape)];
        let mut idx = vec![0usize; rank];
        let mut io = 0usize;
        for &v in &self.data {
            out[io] += v;
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                io += st[ax];
                if idx[ax] < self.shape[ax] {
                    break;
                }
                io -= st[ax] * self.shape[ax];
                idx[ax] = 0;
            }
        }
        Tensor::new(shape, out)
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(shape_err!(
                "matmul inner dims differ: {:?} @ {:?}",
                self.shape,
                other.shape
            ));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_acc(&self.data, &other.data, &mut out, m, k, n);
        Tensor::new(&[m, n], out)
    }

    /// Batched matrix product of `[B, m, k] @ [B, k, n]`.
    pub fn bmm(&self, other: &Self) -> Result<Self> {
        let (b, m, k) = self.dims3()?;
        let (b2, k2, n) = other.dims3()?;
        if b != b2 || k != k2 {
            return Err(shape_err!("bmm {:?} @ {:?}", self.shape, other.shape));
        }
        let mut out = vec![T::zero(); b * m * n];
        for i in 0..b {
            gemm_acc(
                &self.data[i * m * k..(i + 1) * m * k],
                &other.data[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        Tensor::new(&[b, m, n], out)
    }

    /// Swaps the last two axes.
    pub fn transpose_last2(&self) -> Result<Self> {
        let r = self.ndim();
        if r < 2 {
            return Err(shape_err!("transpose needs rank >= 2, got {:?}", self.shape));
        }
        let (rows, cols) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.len() / (rows * cols);
        let mut out = vec![T::zero(); self.len()];
        for b in 0..batch {
            let src = &self.data[b * rows * cols..(b + 1) * rows * cols];
            let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
            for i in 0..rows {
                for j in 0..cols {
                    dst[j * rows + i] = src[i * cols + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Tensor::new(&shape, out)
    }

    /// Concatenates along an existing axis.
    pub fn concat(tensors: &[&Self], axis: usize) -> Result<Self> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::InvalidShape("concat of zero tensors".into()))?;
        if axis >= first.ndim() {
            return Err(shape_err!("concat axis {axis} out of range for {:?}", first.shape));
        }
        for t in tensors {
            let ok = t.ndim() == first.ndim()
                && t.shape.iter().zip(&first.shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err!(
                    "concat along {axis}: {:?} vs {:?}",
                    first.shape,
                    t.shape
                ));
            }
        }
        let (outer, _, inner) = split_at_axis(&first.shape, axis);
        let total: usize = tensors.iter().map(|t| t.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for t in tensors {
                let chunk = t.shape[axis] * inner;
                data.extend_from_slice(&t.data[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Tensor::new(&shape, data)
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(tensors: &[&Self]) -> Result<Self> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::InvalidShape("stack of zero tensors".into()))?;
        let mut lifted = Vec::with_capacity(tensors.len());
        for t in tensors {
            let mut s = vec![1];
            s.extend_from_slice(&t.shape);
            lifted.push(t.reshape(&s)?);
        }
        let refs: Vec<&Self> = lifted.iter().collect();
        let out = Self::concat(&refs, 0)?;
        debug_assert_eq!(&out.shape[1..], &first.shape[..]);
        Ok(out)
    }

    /// The slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.ndim() || start + len > self.shape[axis] || len == 0 {
            return Err(shape_err!(
                "narrow({axis}, {start}, {len}) out of range for {:?}",
                self.shape
            ));
        }
        let (outer, alen, inner) = split_at_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * alen * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor::new(&shape, data)
    }

    /// Reduces one axis, keeping it with size 1. For `Max` also returns the
    /// position of the first maximal element of each lane.
    pub(crate) fn reduce_axis(&self, axis: usize, kind: ReduceKind) -> (Self, Option<Vec<usize>>) {
        let (outer, alen, inner) = split_at_axis(&self.shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        let mut arg = (kind == ReduceKind::Max).then(|| vec![0usize; outer * inner]);
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| self.data[o * alen * inner + a * inner + i];
                let slot = o * inner + i;
                match kind {
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let mut s = T::zero();
                        for a in 0..alen {
                            s += at(a);
                        }
                        if kind == ReduceKind::Mean {
                            s = s / T::of(alen as f64);
                        }
                        out[slot] = s;
                    }
                    ReduceKind::Max => {
                        let (mut best, mut best_a) = (at(0), 0);
                        for a in 1..alen {
                            if at(a) > best || at(a).is_nan() {
                                best = at(a);
                                best_a = a;
                            }
                        }
                        out[slot] = best;
                        if let Some(arg) = arg.as_mut() {
                            arg[slot] = best_a;
                        }
                    }
                }
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = 1;
        (Self { shape, data: out }, arg)
    }

    /// Reduces over `axes`. Reduced axes are kept with size 1 when `keep_dims`
    /// is set and dropped otherwise (a full reduction yields shape `[1]`).
    /// An empty axis list returns the input unchanged.
    pub fn reduce(&self, axes: &[usize], kind: ReduceKind, keep_dims: bool) -> Result<Self> {
        if axes.is_empty() {
            return Ok(self.clone());
        }
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if let Some(&bad) = sorted.iter().find(|&&a| a >= self.ndim()) {
            return Err(shape_err!("reduce axis {bad} out of range for {:?}", self.shape));
        }
        let mut cur = self.clone();
        let count: usize = sorted.iter().map(|&a| self.shape[a]).product();
        let step_kind = if kind == ReduceKind::Mean { ReduceKind::Sum } else { kind };
        for &a in &sorted {
            cur = cur.reduce_axis(a, step_kind).0;
        }
        if kind == ReduceKind::Mean {
            cur = cur.scale(T::one() / T::of(count as f64));
        }
        if keep_dims {
            return Ok(cur);
        }
        let mut shape: Vec<usize> = (0..self.ndim())
            .filter(|a| !sorted.contains(a))
            .map(|a| self.shape[a])
            .collect();
        if shape.is_empty() {
            shape.push(1);
        }
        cur.reshape(&shape)
    }

    pub fn sum_all(&self) -> T {
        self.data.iter().copied().sum()
    }

    pub fn mean_all(&self) -> T {
        self.sum_all() / T::of(self.len() as f64)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// `max|a - b| / max(max|b|, floor)`: relative L-infinity distance.
    pub fn rel_linf(&self, reference: &Self, floor: f64) -> Result<f64> {
        if self.shape != reference.shape {
            return Err(shape_err!("{:?} vs {:?}", self.shape, reference.shape));
        }
        let diff = self
            .data
            .iter()
            .zip(&reference.data)
            .fold(0.0f64, |m, (a, b)| m.max((a.f64() - b.f64()).abs()));
        Ok(diff / reference.max_abs().f64().max(floor))
    }

    pub(crate) fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(shape_err!("expected a matrix, got {:?}", self.shape)),
        }
    }

    pub(crate) fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(shape_err!("expected rank 3, got {:?}", self.shape)),
        }
    }

    pub(crate) fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c, d] => Ok((a, b, c, d)),
            _ => Err(shape_err!("expected N×C×H×W, got {:?}", self.shape)),
        }
    }
}

/// Checks `eps > 0` and returns it; shared by the gradient-check helpers.
pub(crate) fn positive(eps: f64, what: &str) -> Result<f64> {
    contract!(eps > 0.0 && eps.is_finite(), "{what} must be positive, got {eps}");
    Ok(eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn random_is_deterministic() {
        let a = Tensor::<f32>::random(&[2, 2], 7, Init::Uniform(1.0)).unwrap();
        let b = Tensor::<f32>::random(&[2, 2], 7, Init::Uniform(1.0)).unwrap();
        assert_eq!(a.data(), b.data());
        let z = Tensor::<f32>::random(&[4], 3, Init::Uniform(0.0)).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn random_normal_mean() {
        let x = Tensor::<f64>::random(&[10000], 11, Init::Normal(1.0)).unwrap();
        assert!(x.mean_all().abs() < 0.05, "mean {}", x.mean_all());
    }

    #[test]
    fn random_rejects_bad_shapes() {
        assert!(matches!(Tensor::<f32>::random(&[], 1, Init::Normal(1.0)), Err(Error::InvalidShape(_))));
        assert!(matches!(Tensor::<f32>::random(&[3, 0], 1, Init::Normal(1.0)), Err(Error::InvalidShape(_))));
    }

    #[test]
    fn elementwise_and_broadcast() {
        let a = t(&[2], &[1.0, 2.0]);
        let b = t(&[2], &[3.0, 4.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[3.0, 8.0]);
        let zero = Tensor::zeros(&[2]).unwrap();
        assert_eq!(a.add(&zero).unwrap(), a);

        let q = Tensor::<f64>::random(&[1, 6, 1], 1, Init::Normal(1.0)).unwrap();
        let k = Tensor::<f64>::random(&[6, 1], 2, Init::Normal(1.0)).unwrap();
        let p = q.mul(&k).unwrap();
        assert_eq!(p.shape(), &[1, 6, 1]);
        for i in 0..6 {
            assert_eq!(p.data()[i], q.data()[i] * k.data()[i]);
        }

        let bad = t(&[3], &[1.0, 2.0, 3.0]);
        assert!(matches!(a.add(&bad), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn broadcast_over_leading_axis() {
        let m = t(&[2, 1, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let r = t(&[2, 1], &[10.0, 20.0]);
        let out = m.add(&r).unwrap();
        assert_eq!(out.shape(), &[2, 2, 3]);
        assert_eq!(
            out.data(),
            &[11.0, 12.0, 13.0, 21.0, 22.0, 23.0, 14.0, 15.0, 16.0, 24.0, 25.0, 26.0]
        );
        let back = out.sum_to_shape(&[2, 1]).unwrap();
        // each of the two broadcast rows collects 2 batches x 3 columns
        assert_eq!(back.data(), &[10.0 * 6.0 + 21.0, 20.0 * 6.0 + 21.0]);
    }

    #[test]
    fn matmul_examples() {
        let i2 = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(i2.matmul(&m).unwrap(), m);
        let row = t(&[1, 3], &[1.0, 2.0, 3.0]);
        let col = t(&[3, 1], &[1.0, 1.0, 1.0]);
        assert_eq!(row.matmul(&col).unwrap().data(), &[6.0]);
        assert!(matches!(row.matmul(&row), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn concat_and_narrow() {
        let a = t(&[2, 1], &[1.0, 2.0]);
        let b = t(&[2, 1], &[3.0, 4.0]);
        let c = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 2.0, 4.0]);
        assert_eq!(Tensor::concat(&[&a], 0).unwrap(), a);
        assert_eq!(c.narrow(1, 1, 1).unwrap().data(), &[3.0, 4.0]);
        let bad = t(&[3, 1], &[0.0; 3]);
        assert!(Tensor::concat(&[&a, &bad], 1).is_err());
    }

    #[test]
    fn stack_then_reshape_rebuilds_channels() {
        // C tensors of [HW, 1] stacked to [C, HW, 1] then reshaped to [C, H, W]
        let us: Vec<Tensor<f64>> = (0..3)
            .map(|c| Tensor::from_f64(&[4, 1], &[c as f64, 1.0, 2.0, 3.0]).unwrap())
            .collect();
        let refs: Vec<&Tensor<f64>> = us.iter().collect();
        let out = Tensor::stack(&refs).unwrap().reshape(&[3, 2, 2]).unwrap();
        assert_eq!(out.at(&[2, 0, 0]), 2.0);
        assert_eq!(out.at(&[1, 1, 1]), 3.0);
    }

    #[test]
    fn reductions() {
        let m = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(m.reduce(&[0, 1], ReduceKind::Mean, false).unwrap().item(), 2.5);
        assert_eq!(m.reduce(&[0], ReduceKind::Sum, false).unwrap().data(), &[4.0, 6.0]);
        assert_eq!(m.reduce(&[1], ReduceKind::Sum, true).unwrap().shape(), &[2, 1]);
        assert_eq!(m.reduce(&[], ReduceKind::Sum, false).unwrap(), m);
        let v = t(&[3], &[1.0, -5.0, 3.0]);
        assert_eq!(v.reduce(&[0], ReduceKind::Max, false).unwrap().item(), 3.0);
        let ties = t(&[3], &[2.0, 2.0, 1.0]);
        assert_eq!(ties.reduce_axis(0, ReduceKind::Max).1.unwrap(), vec![0]);
    }

    #[test]
    fn transpose_last2_works_batched() {
        let x = t(&[2, 2, 3], &(0..12).map(f64::from).collect::<Vec<_>>());
        let y = x.transpose_last2().unwrap();
        assert_eq!(y.shape(), &[2, 3, 2]);
        assert_eq!(y.at(&[1, 2, 0]), x.at(&[1, 0, 2]));
    }
}
