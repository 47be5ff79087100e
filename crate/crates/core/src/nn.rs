//! Layer primitives: convolution, pooling, resizing, softmax, activations and
//! batch normalisation.
//!
//! Each primitive has a plain forward kernel on [`Tensor`]s. The matching
//! backward kernels are crate-private and consumed by [`crate::autograd`].

use rayon::prelude::*;

use crate::error::{contract, shape_err, Error, Result};
use crate::tensor::{gemm_abt_acc, gemm_acc, gemm_atb_acc, split_at_axis, Float, Init, ReduceKind, Tensor};

/// Weights of a square, zero-padded 2-D convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams<T> {
    /// `[C_out, C_in, k, k]`
    pub weight: Tensor<T>,
    /// `[C_out]`
    pub bias: Tensor<T>,
    pub stride: usize,
    pub padding: usize,
}

impl<T: Float> ConvParams<T> {
    /// A "same" convolution with weights drawn from `U[-1/√fan_in, 1/√fan_in]`
    /// and zero bias.
    pub fn init(c_in: usize, c_out: usize, kernel: usize, seed: u64) -> Result<Self> {
        if kernel.is_multiple_of(2) {
            return Err(Error::Contract(format!("kernel size must be odd, got {kernel}")));
        }
        let fan_in = (c_in * kernel * kernel) as f64;
        Ok(Self {
            weight: Tensor::random(&[c_out, c_in, kernel, kernel], seed, Init::Uniform(1.0 / fan_in.sqrt()))?,
            bias: Tensor::zeros(&[c_out])?,
            stride: 1,
            padding: (kernel - 1) / 2,
        })
    }

    pub fn zeros(c_in: usize, c_out: usize, kernel: usize) -> Result<Self> {
        Ok(Self {
            weight: Tensor::zeros(&[c_out, c_in, kernel, kernel])?,
            bias: Tensor::zeros(&[c_out])?,
            stride: 1,
            padding: (kernel - 1) / 2,
        })
    }

    pub fn c_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.shape()[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Per-channel batch normalisation state.
#[derive(Debug, Clone, PartialEq)]
pub struct BnState<T> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    /// `None` until statistics are initialised or tracked.
    pub running_mean: Option<Tensor<T>>,
    pub running_var: Option<Tensor<T>>,
    pub momentum: f64,
    pub eps: f64,
    pub mode: BnMode,
}

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

impl<T: Float> BnState<T> {
    /// Unit scale, zero shift, running statistics at mean 0 / variance 1.
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: Tensor::ones(&[channels])?,
            beta: Tensor::zeros(&[channels])?,
            running_mean: Some(Tensor::zeros(&[channels])?),
            running_var: Some(Tensor::ones(&[channels])?),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
            mode: BnMode::Train,
        })
    }

    /// Like [`BnState::new`] but without running statistics; evaluation is
    /// refused until a training pass has filled them in.
    pub fn untracked(channels: usize) -> Result<Self> {
        Ok(Self {
            running_mean: None,
            running_var: None,
            ..Self::new(channels)?
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelPool {
    Avg,
    Max,
}

// ---------------------------------------------------------------------------
// convolution

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub(crate) fn new(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (n, c_in, h, w) = match *x {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(shape_err!("conv input must be N×C×H×W, got {x:?}")),
        };
        let (c_out, wc_in, k, k2) = match *weight {
            [a, b, c, d] => (a, b, c, d),
            _ => return Err(shape_err!("conv weight must be rank 4, got {weight:?}")),
        };
        if wc_in != c_in {
            return Err(shape_err!("conv expects {wc_in} input channels, got {c_in}"));
        }
        contract!(k == k2, "non-square kernel {k}×{k2}");
        contract!(stride >= 1, "stride must be >= 1");
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(shape_err!("input {h}×{w} too small for kernel {k} with padding {pad}"));
        }
        Ok(Self {
            n,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            pad,
            h_out: (h + 2 * pad - k) / stride + 1,
            w_out: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }

    /// Unfolds one sample `[C_in, H, W]` into `[C_in·k·k, H_out·W_out]`.
    fn im2col<T: Float>(&self, x: &[T]) -> Vec<T> {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let cols = self.col_cols();
        let mut out = vec![T::zero(); self.col_rows() * cols];
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut out[row * cols..(row + 1) * cols];
                    for oy in 0..self.h_out {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.w_out {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.w_out + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Adjoint of [`ConvGeom::im2col`]: folds columns back into `[C_in, H, W]`.
    fn col2im<T: Float>(&self, cols: &[T]) -> Vec<T> {
        let (k, s, p) = (self.k, self.stride, self.pad as isize);
        let ncols = self.col_cols();
        let mut out = vec![T::zero(); self.c_in * self.h * self.w];
        for c in 0..self.c_in {
            let plane = &mut out[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.h_out {
                        let iy = (oy * s + ky) as isize - p;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.w_out {
                            let ix = (ox * s + kx) as isize - p;
                            if ix >= 0 && ix < self.w as isize {
                                plane[iy as usize * self.w + ix as usize] += src[oy * self.w_out + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

pub(crate) fn conv2d_raw<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    if let Some(b) = bias {
        if b.shape() != [g.c_out] {
            return Err(shape_err!("bias shape {:?}, expected [{}]", b.shape(), g.c_out));
        }
    }
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.col_cols();
    let mut out = vec![T::zero(); g.n * out_sz];
    out.par_chunks_mut(out_sz).enumerate().for_each(|(n, dst)| {
        let xs = &x.data()[n * in_sz..(n + 1) * in_sz];
        if let Some(b) = bias {
            for (o, &bv) in b.data().iter().enumerate() {
                dst[o * g.col_cols()..(o + 1) * g.col_cols()].fill(bv);
            }
        }
        if g.is_pointwise() {
            gemm_acc(weight.data(), xs, dst, g.c_out, g.c_in, g.col_cols());
        } else {
            let cols = g.im2col(xs);
            gemm_acc(weight.data(), &cols, dst, g.c_out, g.col_rows(), g.col_cols());
        }
    });
    Tensor::new(&[g.n, g.c_out, g.h_out, g.w_out], out)
}

/// Gradients of a convolution with respect to (input, weight, bias).
pub(crate) fn conv2d_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let g = ConvGeom::new(x.shape(), weight.shape(), stride, pad)?;
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.col_cols();
    let w_sz = g.c_out * g.col_rows();
    let per_sample: Vec<(Vec<T>, Vec<T>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let xs = &x.data()[n * in_sz..(n + 1) * in_sz];
            let dy = &grad_out.data()[n * out_sz..(n + 1) * out_sz];
            let mut dw = vec![T::zero(); w_sz];
            let dx = if g.is_pointwise() {
                gemm_abt_acc(dy, xs, &mut dw, g.c_out, g.col_cols(), g.c_in);
                let mut dx = vec![T::zero(); in_sz];
                gemm_atb_acc(weight.data(), dy, &mut dx, g.c_in, g.c_out, g.col_cols());
                dx
            } else {
                let cols = g.im2col(xs);
                gemm_abt_acc(dy, &cols, &mut dw, g.c_out, g.col_cols(), g.col_rows());
                let mut dcols = vec![T::zero(); g.col_rows() * g.col_cols()];
                gemm_atb_acc(weight.data(), dy, &mut dcols, g.col_rows(), g.c_out, g.col_cols());
                g.col2im(&dcols)
            };
            (dx, dw)
        })
        .collect();
    let mut dx = Vec::with_capacity(g.n * in_sz);
    let mut dw = vec![T::zero(); w_sz];
    for (sx, sw) in per_sample {
        dx.extend(sx);
        for (a, b) in dw.iter_mut().zip(sw) {
            *a += b;
        }
    }
    let mut db = vec![T::zero(); g.c_out];
    for n in 0..g.n {
        for (o, slot) in db.iter_mut().enumerate() {
            let base = n * out_sz + o * g.col_cols();
            for &v in &grad_out.data()[base..base + g.col_cols()] {
                *slot += v;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), dx)?,
        Tensor::new(weight.shape(), dw)?,
        Tensor::new(&[g.c_out], db)?,
    ))
}

/// Cross-correlation of `x: [N, C_in, H, W]` with zero padding.
pub fn conv2d<T: Float>(x: &Tensor<T>, p: &ConvParams<T>) -> Result<Tensor<T>> {
    conv2d_raw(x, &p.weight, Some(&p.bias), p.stride, p.padding)
}

// ---------------------------------------------------------------------------
// pooling

/// 2×2, stride-2 average pooling over the last two axes.
pub fn avg_pool2d<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let r = x.ndim();
    contract!(r >= 2, "avg_pool2d needs rank >= 2, got {:?}", x.shape());
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    contract!(h % 2 == 0 && w % 2 == 0, "avg_pool2d needs even H and W, got {h}×{w}");
    let (ho, wo) = (h / 2, w / 2);
    let planes = x.len() / (h * w);
    let quarter = T::of(0.25);
    let mut out = Vec::with_capacity(planes * ho * wo);
    for pl in 0..planes {
        let src = &x.data()[pl * h * w..(pl + 1) * h * w];
        for i in 0..ho {
            for j in 0..wo {
                let a = src[2 * i * w + 2 * j];
                let b = src[2 * i * w + 2 * j + 1];
                let c = src[(2 * i + 1) * w + 2 * j];
                let d = src[(2 * i + 1) * w + 2 * j + 1];
                // pairing keeps constant windows exact
                out.push(((a + b) + (c + d)) * quarter);
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 2] = ho;
    shape[r - 1] = wo;
    Tensor::new(&shape, out)
}

pub(crate) fn avg_pool2d_backward<T: Float>(grad_out: &Tensor<T>, in_shape: &[usize]) -> Result<Tensor<T>> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let (ho, wo) = (h / 2, w / 2);
    let planes = grad_out.len() / (ho * wo);
    let quarter = T::of(0.25);
    let mut dx = vec![T::zero(); planes * h * w];
    for pl in 0..planes {
        let g = &grad_out.data()[pl * ho * wo..(pl + 1) * ho * wo];
        let dst = &mut dx[pl * h * w..(pl + 1) * h * w];
        for i in 0..h {
            for j in 0..w {
                dst[i * w + j] = g[(i / 2) * wo + j / 2] * quarter;
            }
        }
    }
    Tensor::new(in_shape, dx)
}

/// Bin boundaries `[⌊j·L/d⌋, ⌊(j+1)·L/d⌋)` for pooling a length-`len` sequence
/// to `target` bins. When `len <= target` every element is its own bin.
pub fn seq_pool_bins(len: usize, target: usize) -> Vec<(usize, usize)> {
    if len <= target {
        return (0..len).map(|i| (i, i + 1)).collect();
    }
    (0..target)
        .map(|j| (j * len / target, (j + 1) * len / target))
        .collect()
}

/// Adaptive average pooling of the last axis down to `target` entries.
pub fn adaptive_avg_pool_seq<T: Float>(x: &Tensor<T>, target: usize) -> Result<Tensor<T>> {
    contract!(target >= 1, "pooled length must be >= 1");
    let r = x.ndim();
    let len = x.shape()[r - 1];
    let bins = seq_pool_bins(len, target);
    let lanes = x.len() / len;
    let mut out = Vec::with_capacity(lanes * bins.len());
    for lane in x.data().chunks(len) {
        for &(a, b) in &bins {
            let s: T = lane[a..b].iter().copied().sum();
            out.push(s / T::of((b - a) as f64));
        }
    }
    let mut shape = x.shape().to_vec();
    shape[r - 1] = bins.len();
    Tensor::new(&shape, out)
}

pub(crate) fn adaptive_avg_pool_seq_backward<T: Float>(
    grad_out: &Tensor<T>,
    in_shape: &[usize],
) -> Result<Tensor<T>> {
    let len = *in_shape.last().expect("rank >= 1");
    let target = *grad_out.shape().last().expect("rank >= 1");
    let bins = seq_pool_bins(len, target);
    let mut dx = Vec::with_capacity(grad_out.len() / bins.len() * len);
    for g in grad_out.data().chunks(bins.len()) {
        for (j, &(a, b)) in bins.iter().enumerate() {
            let share = g[j] / T::of((b - a) as f64);
            dx.extend(std::iter::repeat_n(share, b - a));
        }
    }
    Tensor::new(in_shape, dx)
}

/// Per-pixel mean or max over the channel axis of `[N, C, H, W]`, keeping a
/// size-1 channel axis.
pub fn channel_pool<T: Float>(x: &Tensor<T>, kind: ChannelPool) -> Result<Tensor<T>> {
    x.dims4()?;
    let k = match kind {
        ChannelPool::Avg => ReduceKind::Mean,
        ChannelPool::Max => ReduceKind::Max,
    };
    x.reduce(&[1], k, true)
}

/// `[N, C, H, W] -> [N, C, 1, 1]` spatial mean.
pub fn global_avg_pool<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.dims4()?;
    x.reduce(&[2, 3], ReduceKind::Mean, true)
}

// ---------------------------------------------------------------------------
// bilinear resize (align corners)

/// Source taps for one output index of an align-corners linear resize:
/// `(lower index, upper index, fraction toward upper)`.
pub(crate) fn align_corners_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    (0..out_len)
        .map(|i| {
            if out_len == 1 || in_len == 1 {
                return (0, 0, 0.0);
            }
            let src = (i * (in_len - 1)) as f64 / (out_len - 1) as f64;
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

#[inline]
fn lerp<T: Float>(a: T, b: T, t: T) -> T {
    a + t * (b - a)
}

/// Align-corners bilinear resize of the last two axes to `(out_h, out_w)`.
pub fn bilinear_resize<T: Float>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    contract!(out_h >= 1 && out_w >= 1, "resize target must be at least 1×1");
    let r = x.ndim();
    contract!(r >= 2, "resize needs rank >= 2, got {:?}", x.shape());
    let (h, w) = (x.shape()[r - 2], x.shape()[r - 1]);
    let mut shape = x.shape().to_vec();
    shape[r - 2] = out_h;
    shape[r - 1] = out_w;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let ty: Vec<(usize, usize, T)> = align_corners_taps(out_h, h)
        .into_iter()
        .map(|(a, b, f)| (a, b, T::of(f)))
        .collect();
    let tx: Vec<(usize, usize, T)> = align_corners_taps(out_w, w)
        .into_iter()
        .map(|(a, b, f)| (a, b, T::of(f)))
        .collect();
    let planes = x.len() / (h * w);
    let plane_out = out_h * out_w;
    let mut out = vec![T::zero(); planes * plane_out];
    let work = |(pl, dst): (usize, &mut [T])| {
        let src = &x.data()[pl * h * w..(pl + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let row = &mut dst[i * out_w..(i + 1) * out_w];
            for (o, &(x0, x1, fx)) in row.iter_mut().zip(&tx) {
                let top = lerp(r0[x0], r0[x1], fx);
                let bot = lerp(r1[x0], r1[x1], fx);
                *o = lerp(top, bot, fy);
            }
        }
    };
    if planes * plane_out >= 1 << 16 {
        out.par_chunks_mut(plane_out).enumerate().for_each(work);
    } else {
        out.chunks_mut(plane_out).enumerate().for_each(work);
    }
    Tensor::new(&shape, out)
}

pub(crate) fn bilinear_resize_backward<T: Float>(grad_out: &Tensor<T>, in_shape: &[usize]) -> Result<Tensor<T>> {
    let r = in_shape.len();
    let (h, w) = (in_shape[r - 2], in_shape[r - 1]);
    let (out_h, out_w) = (grad_out.shape()[r - 2], grad_out.shape()[r - 1]);
    if (h, w) == (out_h, out_w) {
        return Ok(grad_out.clone());
    }
    let ty = align_corners_taps(out_h, h);
    let tx = align_corners_taps(out_w, w);
    let planes = grad_out.len() / (out_h * out_w);
    let mut dx = vec![T::zero(); planes * h * w];
    let one = T::one();
    let work = |(pl, dst): (usize, &mut [T])| {
        let g = &grad_out.data()[pl * out_h * out_w..(pl + 1) * out_h * out_w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            let fy = T::of(fy);
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let fx = T::of(fx);
                let v = g[i * out_w + j];
                dst[y0 * w + x0] += v * (one - fy) * (one - fx);
                dst[y0 * w + x1] += v * (one - fy) * fx;
                dst[y1 * w + x0] += v * fy * (one - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    };
    if planes * out_h * out_w >= 1 << 16 {
        dx.par_chunks_mut(h * w).enumerate().for_each(work);
    } else {
        dx.chunks_mut(h * w).enumerate().for_each(work);
    }
    Tensor::new(in_shape, dx)
}

// ---------------------------------------------------------------------------
// softmax and activations

/// Numerically stable softmax along `axis`.
pub fn softmax<T: Float>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.ndim() {
        return Err(shape_err!("softmax axis {axis} out of range for {:?}", x.shape()));
    }
    let (outer, alen, inner) = split_at_axis(x.shape(), axis);
    let mut out = vec![T::zero(); x.len()];
    let src = x.data();
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * alen * inner + a * inner + i;
            let mut m = src[at(0)];
            for a in 1..alen {
                m = m.max(src[at(a)]);
            }
            let mut total = T::zero();
            for a in 0..alen {
                let e = (src[at(a)] - m).exp();
                out[at(a)] = e;
                total += e;
            }
            for a in 0..alen {
                out[at(a)] = out[at(a)] / total;
            }
        }
    }
    Tensor::new(x.shape(), out)
}

pub(crate) fn softmax_backward<T: Float>(y: &Tensor<T>, grad_out: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (outer, alen, inner) = split_at_axis(y.shape(), axis);
    let mut dx = vec![T::zero(); y.len()];
    let (yd, gd) = (y.data(), grad_out.data());
    for o in 0..outer {
        for i in 0..inner {
            let at = |a: usize| o * alen * inner + a * inner + i;
            let mut dot = T::zero();
            for a in 0..alen {
                dot += yd[at(a)] * gd[at(a)];
            }
            for a in 0..alen {
                dx[at(a)] = yd[at(a)] * (gd[at(a)] - dot);
            }
        }
    }
    Tensor::new(y.shape(), dx)
}

#[inline]
pub(crate) fn sigmoid_scalar<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn activation<T: Float>(x: &Tensor<T>, kind: Activation) -> Tensor<T> {
    match kind {
        Activation::Sigmoid => x.map(sigmoid_scalar),
        Activation::Relu => x.map(|v| if v < T::zero() { T::zero() } else { v }),
    }
}

// ---------------------------------------------------------------------------
// batch norm

/// Cached values of a training-mode batch norm, needed by its backward rule.
#[derive(Debug, Clone)]
pub(crate) struct BnCache<T> {
    pub x_hat: Tensor<T>,
    pub inv_std: Vec<T>,
}

fn bn_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err!("batch norm input must be N×C×…, got {shape:?}"));
    }
    let n = shape[0];
    let c = shape[1];
    let spatial = shape[2..].iter().product();
    Ok((n, c, spatial))
}

/// Batch statistics `(mean, biased variance)` per channel.
pub(crate) fn bn_batch_stats<T: Float>(x: &Tensor<T>) -> Result<(Vec<T>, Vec<T>)> {
    let (n, c, sp) = bn_layout(x.shape())?;
    let count = n * sp;
    contract!(
        count >= 2,
        "training-mode batch norm needs at least 2 values per channel, got {count}"
    );
    let d = x.data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ch in 0..c {
        let mut s = T::zero();
        for b in 0..n {
            for &v in &d[(b * c + ch) * sp..(b * c + ch + 1) * sp] {
                s += v;
            }
        }
        let m = s / T::of(count as f64);
        let mut q = T::zero();
        for b in 0..n {
            for &v in &d[(b * c + ch) * sp..(b * c + ch + 1) * sp] {
                q += (v - m) * (v - m);
            }
        }
        mean[ch] = m;
        var[ch] = q / T::of(count as f64);
    }
    Ok((mean, var))
}

/// Normalises with the given per-channel statistics and applies the affine
/// transform. Returns the output and the normalised input.
pub(crate) fn bn_apply<T: Float>(
    x: &Tensor<T>,
    mean: &[T],
    var: &[T],
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    eps: f64,
) -> Result<(Tensor<T>, BnCache<T>)> {
    let (n, c, sp) = bn_layout(x.shape())?;
    if gamma.shape() != [c] || beta.shape() != [c] || mean.len() != c || var.len() != c {
        return Err(shape_err!("batch norm over {c} channels got gamma {:?}", gamma.shape()));
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + T::of(eps)).sqrt()).collect();
    let mut y = vec![T::zero(); x.len()];
    let mut x_hat = vec![T::zero(); x.len()];
    for b in 0..n {
        for ch in 0..c {
            let (g, bt) = (gamma.data()[ch], beta.data()[ch]);
            let range = (b * c + ch) * sp..(b * c + ch + 1) * sp;
            for idx in range {
                let xh = (x.data()[idx] - mean[ch]) * inv_std[ch];
                x_hat[idx] = xh;
                y[idx] = g * xh + bt;
            }
        }
    }
    Ok((
        Tensor::new(x.shape(), y)?,
        BnCache {
            x_hat: Tensor::new(x.shape(), x_hat)?,
            inv_std,
        },
    ))
}

/// Gradients `(dx, dgamma, dbeta)`. With `batch_stats` the statistics are
/// treated as functions of the input; otherwise they are constants.
pub(crate) fn bn_backward<T: Float>(
    cache: &BnCache<T>,
    gamma: &Tensor<T>,
    grad_out: &Tensor<T>,
    batch_stats: bool,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (n, c, sp) = bn_layout(grad_out.shape())?;
    let count = T::of((n * sp) as f64);
    let (xh, dy) = (cache.x_hat.data(), grad_out.data());
    let mut dgamma = vec![T::zero(); c];
    let mut dbeta = vec![T::zero(); c];
    for b in 0..n {
        for ch in 0..c {
            for idx in (b * c + ch) * sp..(b * c + ch + 1) * sp {
                dgamma[ch] += dy[idx] * xh[idx];
                dbeta[ch] += dy[idx];
            }
        }
    }
    let mut dx = vec![T::zero(); grad_out.len()];
    for b in 0..n {
        for ch in 0..c {
            let g = gamma.data()[ch];
            let inv = cache.inv_std[ch];
            for idx in (b * c + ch) * sp..(b * c + ch + 1) * sp {
                dx[idx] = if batch_stats {
                    // d/dx of gamma·x̂ with x̂ depending on batch mean and variance
                    g * inv / count * (count * dy[idx] - dbeta[ch] - xh[idx] * dgamma[ch])
                } else {
                    g * inv * dy[idx]
                };
            }
        }
    }
    Ok((
        Tensor::new(grad_out.shape(), dx)?,
        Tensor::new(&[c], dgamma)?,
        Tensor::new(&[c], dbeta)?,
    ))
}

/// Batch normalisation of `[N, C, …]`. In training mode the running
/// statistics of `state` are updated in place.
pub fn batchnorm<T: Float>(x: &Tensor<T>, state: &mut BnState<T>) -> Result<Tensor<T>> {
    match state.mode {
        BnMode::Train => {
            let (mean, var) = bn_batch_stats(x)?;
            let (y, _) = bn_apply(x, &mean, &var, &state.gamma, &state.beta, state.eps)?;
            let count = x.len() / mean.len();
            update_running_stats(state, &mean, &var, count)?;
            Ok(y)
        }
        BnMode::Eval => {
            let (rm, rv) = match (&state.running_mean, &state.running_var) {
                (Some(m), Some(v)) => (m.data().to_vec(), v.data().to_vec()),
                _ => {
                    return Err(Error::Contract(
                        "evaluation-mode batch norm without running statistics".into(),
                    ))
                }
            };
            Ok(bn_apply(x, &rm, &rv, &state.gamma, &state.beta, state.eps)?.0)
        }
    }
}

/// Exponential moving average of the statistics; the variance fed in is the
/// biased batch variance and is stored unbiased.
pub(crate) fn update_running_stats<T: Float>(
    state: &mut BnState<T>,
    mean: &[T],
    var: &[T],
    count: usize,
) -> Result<()> {
    let c = mean.len();
    let m = T::of(state.momentum);
    let keep = T::one() - m;
    let unbias = T::of(count as f64 / (count as f64 - 1.0).max(1.0));
    let rm = state.running_mean.get_or_insert(Tensor::zeros(&[c])?);
    let rm_new: Vec<T> = rm.data().iter().zip(mean).map(|(&r, &b)| keep * r + m * b).collect();
    *rm = Tensor::new(&[c], rm_new)?;
    let rv = state.running_var.get_or_insert(Tensor::ones(&[c])?);
    let rv_new: Vec<T> = rv
        .data()
        .iter()
        .zip(var)
        .map(|(&r, &b)| keep * r + m * b * unbias)
        .collect();
    *rv = Tensor::new(&[c], rv_new)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn direct_conv(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], pad: usize) -> Tensor<f64> {
        let (n, ci, h, wd) = x.dims4().unwrap();
        let (co, _, k, _) = w.dims4().unwrap();
        let mut out = vec![0.0; n * co * h * wd];
        for s in 0..n {
            for o in 0..co {
                for i in 0..h {
                    for j in 0..wd {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let (yy, xx) = (i as isize + ky as isize - pad as isize, j as isize + kx as isize - pad as isize);
                                    if yy >= 0 && xx >= 0 && (yy as usize) < h && (xx as usize) < wd {
                                        acc += w.at(&[o, c, ky, kx]) * x.at(&[s, c, yy as usize, xx as usize]);
                                    }
                                }
                            }
                        }
                        out[((s * co + o) * h + i) * wd + j] = acc;
                    }
                }
            }
        }
        Tensor::new(&[n, co, h, wd], out).unwrap()
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut p = ConvParams::<f64>::zeros(1, 1, 3).unwrap();
        p.weight = t(&[1, 1, 3, 3], &[0., 0., 0., 0., 1., 0., 0., 0., 0.]);
        assert_eq!(conv2d(&x, &p).unwrap(), x);
    }

    #[test]
    fn conv_all_ones_kernel() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mut p = ConvParams::<f64>::zeros(1, 1, 3).unwrap();
        p.weight = Tensor::ones(&[1, 1, 3, 3]).unwrap();
        assert_eq!(conv2d(&x, &p).unwrap().data(), &[10.0; 4]);
    }

    #[test]
    fn conv_pointwise_with_bias() {
        let x = t(&[1, 1, 1, 1], &[0.0]);
        let mut p = ConvParams::<f64>::zeros(1, 1, 1).unwrap();
        p.weight = t(&[1, 1, 1, 1], &[2.0]);
        p.bias = t(&[1], &[1.0]);
        assert_eq!(conv2d(&x, &p).unwrap().data(), &[1.0]);
    }

    #[test]
    fn conv_matches_direct_loops() {
        let x = Tensor::<f64>::random(&[2, 3, 5, 6], 1, Init::Normal(1.0)).unwrap();
        for k in [1, 3, 7] {
            let p = ConvParams::<f64>::init(3, 4, k, 9).unwrap();
            let mut p = p;
            p.bias = Tensor::random(&[4], 2, Init::Normal(1.0)).unwrap();
            let fast = conv2d(&x, &p).unwrap();
            let slow = direct_conv(&x, &p.weight, p.bias.data(), p.padding);
            assert!(fast.rel_linf(&slow, 1.0).unwrap() < 1e-12, "k={k}");
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f32>::zeros(&[1, 2, 4, 4]).unwrap();
        let p = ConvParams::<f32>::init(3, 4, 3, 0).unwrap();
        assert!(matches!(conv2d(&x, &p), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn avg_pool_examples() {
        assert_eq!(avg_pool2d(&t(&[2, 2], &[1., 2., 3., 4.])).unwrap().data(), &[2.5]);
        let ramp = t(&[4, 4], &(0..16).map(f64::from).collect::<Vec<_>>());
        assert_eq!(avg_pool2d(&ramp).unwrap().data(), &[2.5, 4.5, 10.5, 12.5]);
        let c = Tensor::<f32>::full(&[3, 8, 8], 0.1).unwrap();
        assert!(avg_pool2d(&c).unwrap().data().iter().all(|&v| v == 0.1));
        assert!(matches!(avg_pool2d(&t(&[3, 4], &[0.0; 12])), Err(Error::Contract(_))));
    }

    #[test]
    fn seq_pool_examples() {
        let x = t(&[4], &[1., 2., 3., 4.]);
        assert_eq!(adaptive_avg_pool_seq(&x, 2).unwrap().data(), &[1.5, 3.5]);
        assert_eq!(adaptive_avg_pool_seq(&x, 4).unwrap(), x);
        assert_eq!(adaptive_avg_pool_seq(&x, 9).unwrap(), x);
        // floor rule: bins {0}, {1,2}, {3}, {4,5}
        let y = t(&[6], &[1., 2., 4., 8., 16., 32.]);
        assert_eq!(adaptive_avg_pool_seq(&y, 4).unwrap().data(), &[1., 3., 8., 24.]);
    }

    #[test]
    fn channel_and_global_pool() {
        let x = t(&[1, 2, 1, 1], &[1.0, 3.0]);
        assert_eq!(channel_pool(&x, ChannelPool::Avg).unwrap().data(), &[2.0]);
        assert_eq!(channel_pool(&x, ChannelPool::Max).unwrap().data(), &[3.0]);
        let one = Tensor::<f64>::random(&[1, 1, 3, 3], 4, Init::Normal(1.0)).unwrap();
        assert_eq!(channel_pool(&one, ChannelPool::Avg).unwrap(), one);
        assert_eq!(channel_pool(&one, ChannelPool::Max).unwrap(), one);
        let g = global_avg_pool(&t(&[1, 1, 2, 2], &[1., 2., 3., 4.])).unwrap();
        assert_eq!(g.shape(), &[1, 1, 1, 1]);
        assert_eq!(g.item(), 2.5);
    }

    #[test]
    fn channel_pool_matches_loop() {
        let x = Tensor::<f64>::random(&[1, 4, 3, 3], 5, Init::Normal(1.0)).unwrap();
        let avg = channel_pool(&x, ChannelPool::Avg).unwrap();
        let max = channel_pool(&x, ChannelPool::Max).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let vals: Vec<f64> = (0..4).map(|c| x.at(&[0, c, i, j])).collect();
                let mean = vals.iter().sum::<f64>() / 4.0;
                let mx = vals.iter().cloned().fold(f64::MIN, f64::max);
                assert!((avg.at(&[0, 0, i, j]) - mean).abs() < 1e-15);
                assert_eq!(max.at(&[0, 0, i, j]), mx);
            }
        }
    }

    #[test]
    fn global_pool_matches_loop() {
        let x = Tensor::<f64>::random(&[1, 8, 5, 5], 6, Init::Normal(1.0)).unwrap();
        let g = global_avg_pool(&x).unwrap();
        for c in 0..8 {
            let mut s = 0.0;
            for i in 0..5 {
                for j in 0..5 {
                    s += x.at(&[0, c, i, j]);
                }
            }
            assert!((g.data()[c] - s / 25.0).abs() < 1e-14);
        }
    }

    #[test]
    fn resize_examples() {
        let x = t(&[2, 2], &[0., 1., 2., 3.]);
        let y = bilinear_resize(&x, 3, 3).unwrap();
        assert_eq!(y.data(), &[0., 0.5, 1., 1., 1.5, 2., 2., 2.5, 3.]);
        let r = Tensor::<f32>::random(&[2, 5, 7], 3, Init::Normal(1.0)).unwrap();
        assert_eq!(bilinear_resize(&r, 5, 7).unwrap(), r);
        let c = Tensor::<f32>::full(&[1, 3, 3], 0.3).unwrap();
        assert!(bilinear_resize(&c, 8, 5).unwrap().data().iter().all(|&v| v == 0.3));
        assert!(bilinear_resize(&c, 0, 5).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&t(&[4], &[0.3; 4]), 0).unwrap();
        assert!(s.data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert_eq!(softmax(&t(&[1], &[5.0]), 0).unwrap().data(), &[1.0]);
        let s = softmax(&t(&[2], &[0.0, 3f64.ln()]), 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15 && (s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn activations() {
        let x = t(&[3], &[0.0, -2.0, 2.0]);
        assert_eq!(activation(&x, Activation::Sigmoid).data()[0], 0.5);
        assert_eq!(activation(&x, Activation::Relu).data(), &[0.0, 0.0, 2.0]);
        let big = Tensor::<f32>::from_f64(&[2], &[40.0, -40.0]).unwrap();
        let s = activation(&big, Activation::Sigmoid);
        assert_eq!(s.data()[0], 1.0);
        assert!(s.data()[1] > 0.0 && s.data()[1] < 1e-17);
    }

    #[test]
    fn batchnorm_train_normalises() {
        let x = Tensor::<f64>::random(&[4, 3, 5, 5], 8, Init::Normal(3.0)).unwrap();
        let mut bn = BnState::new(3).unwrap();
        let y = batchnorm(&x, &mut bn).unwrap();
        let mean = y.reduce(&[0, 2, 3], ReduceKind::Mean, false).unwrap();
        for c in 0..3 {
            assert!(mean.data()[c].abs() < 1e-5);
            let var: f64 = (0..4)
                .flat_map(|n| (0..25).map(move |i| (n, i)))
                .map(|(n, i)| y.at(&[n, c, i / 5, i % 5]).powi(2))
                .sum::<f64>()
                / 100.0;
            assert!((var - 1.0).abs() < 1e-5, "var {var}");
        }
        assert_ne!(bn.running_mean.as_ref().unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn batchnorm_constant_channel_gives_beta() {
        let x = Tensor::<f64>::full(&[2, 1, 2, 2], 7.0).unwrap();
        let mut bn = BnState::new(1).unwrap();
        bn.beta = t(&[1], &[0.25]);
        let y = batchnorm(&x, &mut bn).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn batchnorm_eval_affine() {
        let x = t(&[1, 1, 1, 1], &[3.0]);
        let mut bn = BnState::new(1).unwrap();
        bn.mode = BnMode::Eval;
        bn.gamma = t(&[1], &[2.0]);
        bn.beta = t(&[1], &[1.0]);
        let y = batchnorm(&x, &mut bn).unwrap().item();
        assert!((y - 7.0).abs() < 1e-4, "{y}");
        let mut fresh = BnState::<f64>::untracked(1).unwrap();
        fresh.mode = BnMode::Eval;
        assert!(matches!(batchnorm(&x, &mut fresh), Err(Error::Contract(_))));
        let mut tiny = BnState::<f64>::new(1).unwrap();
        assert!(matches!(batchnorm(&x, &mut tiny), Err(Error::Contract(_))));
    }
}
