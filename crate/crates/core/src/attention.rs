//! Vision Fastformer: additive attention over image positions.
//!
//! For an input `X: [C, H, W]` with `HW = H·W` positions:
//!
//! 1. 1×1 projections give per-head queries and keys `Q, K: [heads, HW]`
//!    and values `V: [C, HW]`.
//! 2. `α = softmax_heads(Q)` and the global query `q = Σ_h α_h ⊙ Q_h`.
//! 3. `p_h = q ⊙ K_h`, `β = softmax_heads(p)`.
//! 4. Both are average-pooled along positions to length `d`, and the global
//!    key is `k_small = Σ_h AP(p_h) · AP(β_h)ᵀ ∈ R^{d×d}`, bilinearly resized
//!    to `k ∈ R^{HW×HW}`.
//! 5. Each value channel is mixed by `u_c = k · v_c`, and `u` is reshaped
//!    back to `[C, H, W]`.
//!
//! The align-corners resize of a `d×d` matrix to `HW×HW` is separable:
//! `k = B · k_small · Bᵀ` with `B ∈ R^{HW×d}` the 1-D interpolation matrix.
//! [`VfMode::Naive`] materialises `k` (quadratic in `HW`);
//! [`VfMode::Factored`] applies `B`, `k_small` and `Bᵀ` in turn and never
//! builds it.

use crate::autograd::Var;
use crate::error::{shape_err, Error, Result};
use crate::nn::{self, BnMode, ConvParams};
use crate::params::{insert_conv, read_conv, ModelWeights, Session};
use crate::tensor::{Float, Tensor};

/// Largest `HW` for which the naive path will materialise `k`
/// (`4096² · 4` bytes = 64 MiB in single precision).
pub const NAIVE_MAX_HW: usize = 4096;

/// Default pooled length of the global key.
pub const DEFAULT_POOLED_LEN: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum VfMode {
    Naive,
    Factored,
}

impl std::str::FromStr for VfMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Self::Naive),
            "factored" => Ok(Self::Factored),
            _ => Err(Error::Config(format!("unknown attention mode {s:?} (naive|factored)"))),
        }
    }
}

impl std::fmt::Display for VfMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Naive => "naive",
            Self::Factored => "factored",
        })
    }
}

/// Parameters of one Vision Fastformer.
#[derive(Debug, Clone, PartialEq)]
pub struct VfParams<T> {
    /// `C → heads`
    pub wq: ConvParams<T>,
    /// `C → heads`
    pub wk: ConvParams<T>,
    /// `C → C`
    pub wv: ConvParams<T>,
    pub heads: usize,
    pub pooled_len: usize,
}

impl<T: Float> VfParams<T> {
    pub fn init(channels: usize, heads: usize, pooled_len: usize, seed: u64) -> Result<Self> {
        check_dims(heads, pooled_len)?;
        Ok(Self {
            wq: ConvParams::init(channels, heads, 1, seed)?,
            wk: ConvParams::init(channels, heads, 1, seed.wrapping_add(1))?,
            wv: ConvParams::init(channels, channels, 1, seed.wrapping_add(2))?,
            heads,
            pooled_len,
        })
    }

    pub fn zeros(channels: usize, heads: usize, pooled_len: usize) -> Result<Self> {
        check_dims(heads, pooled_len)?;
        Ok(Self {
            wq: ConvParams::zeros(channels, heads, 1)?,
            wk: ConvParams::zeros(channels, heads, 1)?,
            wv: ConvParams::zeros(channels, channels, 1)?,
            heads,
            pooled_len,
        })
    }

    pub fn channels(&self) -> usize {
        self.wv.c_out()
    }

    pub fn insert_into(&self, w: &mut ModelWeights<T>, prefix: &str) -> Result<()> {
        insert_conv(w, &format!("{prefix}.wq"), self.wq.clone())?;
        insert_conv(w, &format!("{prefix}.wk"), self.wk.clone())?;
        insert_conv(w, &format!("{prefix}.wv"), self.wv.clone())
    }

    pub fn from_weights(w: &ModelWeights<T>, prefix: &str, pooled_len: usize) -> Result<Self> {
        let wq = read_conv(w, &format!("{prefix}.wq"))?;
        let heads = wq.c_out();
        Ok(Self {
            wq,
            wk: read_conv(w, &format!("{prefix}.wk"))?,
            wv: read_conv(w, &format!("{prefix}.wv"))?,
            heads,
            pooled_len,
        })
    }

    fn weights(&self) -> Result<ModelWeights<T>> {
        let mut w = ModelWeights::new();
        self.insert_into(&mut w, "vf")?;
        Ok(w)
    }
}

fn check_dims(heads: usize, pooled_len: usize) -> Result<()> {
    if heads == 0 || pooled_len == 0 {
        return Err(Error::Config(format!(
            "heads ({heads}) and pooled length ({pooled_len}) must be >= 1"
        )));
    }
    Ok(())
}

/// Every intermediate of one forward pass for a single image.
#[derive(Debug, Clone)]
pub struct VfIntermediates<T> {
    /// `[heads, HW, 1]`
    pub q_heads: Tensor<T>,
    /// `[heads, HW, 1]`
    pub alpha: Tensor<T>,
    /// `[1, HW, 1]`
    pub q: Tensor<T>,
    /// `[heads, HW, 1]`
    pub k_heads: Tensor<T>,
    /// `[heads, HW, 1]`
    pub p: Tensor<T>,
    /// `[heads, HW, 1]`
    pub beta: Tensor<T>,
    /// `[d', d']` with `d' = min(d, HW)`
    pub k_small: Tensor<T>,
    /// `[HW, HW]`; naive mode only
    pub k: Option<Tensor<T>>,
    /// `[C, HW, 1]`
    pub v: Tensor<T>,
    /// `[C, HW, 1]`
    pub u: Tensor<T>,
}

/// The 1-D align-corners interpolation matrix `B ∈ R^{HW×d}`.
#[derive(Debug, Clone, PartialEq)]
pub struct InterpOperator<T> {
    pub matrix: Tensor<T>,
}

impl<T: Float> InterpOperator<T> {
    /// Row `i` holds the hat-function weights `max(0, 1 − |sᵢ − j|)` with
    /// `sᵢ = i·(d−1)/(HW−1)`.
    pub fn new(hw: usize, d: usize) -> Result<Self> {
        if hw == 0 || d == 0 {
            return Err(Error::InvalidShape(format!("interpolation {hw}×{d}")));
        }
        let mut m = vec![T::zero(); hw * d];
        for i in 0..hw {
            let src = if hw == 1 || d == 1 {
                0.0
            } else {
                (i * (d - 1)) as f64 / (hw - 1) as f64
            };
            for j in 0..d {
                let w = 1.0 - (src - j as f64).abs();
                if w > 0.0 {
                    m[i * d + j] = T::of(w);
                }
            }
        }
        Ok(Self {
            matrix: Tensor::new(&[hw, d], m)?,
        })
    }

    pub fn out_len(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn in_len(&self) -> usize {
        self.matrix.shape()[1]
    }
}

/// Pooled length actually used for a sequence of `hw` positions.
pub fn effective_pooled_len(hw: usize, d: usize) -> usize {
    d.min(hw)
}

// ---------------------------------------------------------------------------
// Tensor-level building blocks for a single image. These mirror the stages
// of the tape implementation below and are used to cross-check it.

fn lift3<T: Float>(x: &Tensor<T>) -> Result<(Tensor<T>, usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((x.reshape(&[1, c, h, w])?, c, h, w)),
        _ => Err(shape_err!("expected C×H×W, got {:?}", x.shape())),
    }
}

/// `Q, K: [heads, HW, 1]` and `V: [C, HW, 1]`, positions flattened row-major
/// (`hw = i·W + j`).
pub fn project_qkv<T: Float>(x: &Tensor<T>, p: &VfParams<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let (x4, c, h, w) = lift3(x)?;
    if c != p.channels() || p.wq.c_in() != c {
        return Err(shape_err!("VF expects {} channels, got {c}", p.wq.c_in()));
    }
    let hw = h * w;
    let q = nn::conv2d(&x4, &p.wq)?.reshape(&[p.heads, hw, 1])?;
    let k = nn::conv2d(&x4, &p.wk)?.reshape(&[p.heads, hw, 1])?;
    let v = nn::conv2d(&x4, &p.wv)?.reshape(&[c, hw, 1])?;
    Ok((q, k, v))
}

/// Head-axis softmax of the queries and the resulting global query
/// `q = Σ_h α_h ⊙ q_h` of shape `[1, HW, 1]`.
pub fn global_query<T: Float>(q_heads: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let alpha = nn::softmax(q_heads, 0)?;
    let q = alpha
        .mul(q_heads)?
        .reduce(&[0], crate::tensor::ReduceKind::Sum, true)?;
    Ok((alpha, q))
}

/// `p_h = q ⊙ k_h` and `β = softmax_heads(p)`.
pub fn key_interaction<T: Float>(q: &Tensor<T>, k_heads: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let p = q.mul(k_heads)?;
    if p.shape() != k_heads.shape() {
        return Err(shape_err!("global query {:?} vs keys {:?}", q.shape(), k_heads.shape()));
    }
    let beta = nn::softmax(&p, 0)?;
    Ok((p, beta))
}

/// `k_small = Σ_h AP(p_h)·AP(β_h)ᵀ`, shape `[d', d']`.
pub fn global_key_small<T: Float>(p: &Tensor<T>, beta: &Tensor<T>, d: usize) -> Result<Tensor<T>> {
    let (heads, hw, _) = p.dims3()?;
    let ap = nn::adaptive_avg_pool_seq(&p.reshape(&[heads, hw])?, d)?;
    let ab = nn::adaptive_avg_pool_seq(&beta.reshape(&[heads, hw])?, d)?;
    ap.transpose_last2()?.matmul(&ab)
}

/// The full `HW×HW` global key, `k = BI(k_small)`.
pub fn global_key_naive<T: Float>(p: &Tensor<T>, beta: &Tensor<T>, d: usize, hw: usize) -> Result<Tensor<T>> {
    if hw > NAIVE_MAX_HW {
        return Err(Error::ResourceLimit(format!(
            "naive global key for HW={hw} exceeds the {NAIVE_MAX_HW} limit"
        )));
    }
    let small = global_key_small(p, beta, d)?;
    nn::bilinear_resize(&small, hw, hw)
}

/// `k · v` evaluated as `B·(k_small·(Bᵀ·v))`, for `v: [HW, 1]`.
pub fn global_key_factored_apply<T: Float>(
    p: &Tensor<T>,
    beta: &Tensor<T>,
    d: usize,
    v: &Tensor<T>,
    b: &InterpOperator<T>,
) -> Result<Tensor<T>> {
    let small = global_key_small(p, beta, d)?;
    let hw = v.shape()[0];
    if b.out_len() != hw || b.in_len() != small.shape()[0] || v.shape() != [hw, 1] {
        return Err(shape_err!(
            "interpolation {:?} incompatible with v {:?} and k_small {:?}",
            b.matrix.shape(),
            v.shape(),
            small.shape()
        ));
    }
    let bt = b.matrix.transpose_last2()?;
    b.matrix.matmul(&small.matmul(&bt.matmul(v)?)?)
}

// ---------------------------------------------------------------------------
// Tape implementation, batched over N.

/// Graph nodes of one batched forward pass.
#[derive(Debug, Clone, Copy)]
pub struct VfVars {
    /// `[N, heads, HW]`
    pub q_heads: Var,
    pub alpha: Var,
    /// `[N, 1, HW]`
    pub q: Var,
    pub k_heads: Var,
    pub p: Var,
    pub beta: Var,
    /// `[N, d', d']`
    pub k_small: Var,
    /// `[N, HW, HW]`, naive mode only
    pub k: Option<Var>,
    /// `[N, C, HW]`
    pub v: Var,
    pub u: Var,
    /// `[N, C, H, W]`
    pub out: Var,
}

/// Records a Vision Fastformer on `x: [N, C, H, W]` using the parameters
/// stored under `prefix` (`.wq`, `.wk`, `.wv`).
pub fn vf_graph<T: Float>(s: &mut Session<'_, T>, x: Var, prefix: &str, pooled_len: usize, mode: VfMode) -> Result<VfVars> {
    let (n, c, h, w) = s.value(x).dims4()?;
    let hw = h * w;
    if mode == VfMode::Naive && hw > NAIVE_MAX_HW {
        return Err(Error::ResourceLimit(format!(
            "naive attention for HW={hw} exceeds the {NAIVE_MAX_HW} limit"
        )));
    }
    check_dims(1, pooled_len)?;
    let qc = s.conv(x, &format!("{prefix}.wq"))?;
    let kc = s.conv(x, &format!("{prefix}.wk"))?;
    let vc = s.conv(x, &format!("{prefix}.wv"))?;
    let heads = s.value(qc).shape()[1];
    let g = &mut s.graph;

    let q_heads = g.reshape(qc, &[n, heads, hw])?;
    let k_heads = g.reshape(kc, &[n, heads, hw])?;
    let v = g.reshape(vc, &[n, c, hw])?;

    let alpha = g.softmax(q_heads, 1)?;
    let weighted = g.mul(alpha, q_heads)?;
    let q = g.sum_axis(weighted, 1)?;

    let p = g.mul(q, k_heads)?;
    let beta = g.softmax(p, 1)?;

    let d = effective_pooled_len(hw, pooled_len);
    let ap = g.seq_pool(p, d)?;
    let ab = g.seq_pool(beta, d)?;
    let ap_t = g.transpose_last2(ap)?;
    let k_small = g.bmm(ap_t, ab)?;

    let (k, u) = match mode {
        VfMode::Naive => {
            let small4 = g.reshape(k_small, &[n, 1, d, d])?;
            let big = g.resize(small4, hw, hw)?;
            let k = g.reshape(big, &[n, hw, hw])?;
            // u_c = k·v_c for every channel, i.e. U = V·kᵀ row-wise
            let kt = g.transpose_last2(k)?;
            (Some(k), g.bmm(v, kt)?)
        }
        VfMode::Factored => {
            let b = InterpOperator::<T>::new(hw, d)?;
            let bt = b.matrix.transpose_last2()?;
            let b = g.input(b.matrix);
            let bt = g.input(bt);
            let v2 = g.reshape(v, &[n * c, hw])?;
            let t1 = g.matmul(v2, b)?;
            let t1 = g.reshape(t1, &[n, c, d])?;
            let ks_t = g.transpose_last2(k_small)?;
            let t2 = g.bmm(t1, ks_t)?;
            let t2 = g.reshape(t2, &[n * c, d])?;
            let u = g.matmul(t2, bt)?;
            (None, g.reshape(u, &[n, c, hw])?)
        }
    };
    let out = g.reshape(u, &[n, c, h, w])?;
    Ok(VfVars {
        q_heads,
        alpha,
        q,
        k_heads,
        p,
        beta,
        k_small,
        k,
        v,
        u,
        out,
    })
}

/// Runs a Vision Fastformer on one image `x: [C, H, W]`; the output has the
/// input's shape.
pub fn vf_forward<T: Float>(x: &Tensor<T>, p: &VfParams<T>, mode: VfMode) -> Result<(Tensor<T>, VfIntermediates<T>)> {
    let (x4, c, h, w) = lift3(x)?;
    if c != p.wq.c_in() {
        return Err(shape_err!("VF expects {} channels, got {c}", p.wq.c_in()));
    }
    let weights = p.weights()?;
    let mut s = Session::new(&weights, BnMode::Eval);
    let xv = s.input(x4);
    let vars = vf_graph(&mut s, xv, "vf", p.pooled_len, mode)?;
    let hw = h * w;
    let heads = p.heads;
    let val = |v: Var, shape: &[usize]| s.value(v).reshape(shape);
    let d = effective_pooled_len(hw, p.pooled_len);
    let inter = VfIntermediates {
        q_heads: val(vars.q_heads, &[heads, hw, 1])?,
        alpha: val(vars.alpha, &[heads, hw, 1])?,
        q: val(vars.q, &[1, hw, 1])?,
        k_heads: val(vars.k_heads, &[heads, hw, 1])?,
        p: val(vars.p, &[heads, hw, 1])?,
        beta: val(vars.beta, &[heads, hw, 1])?,
        k_small: val(vars.k_small, &[d, d])?,
        k: vars.k.map(|k| val(k, &[hw, hw])).transpose()?,
        v: val(vars.v, &[c, hw, 1])?,
        u: val(vars.u, &[c, hw, 1])?,
    };
    Ok((val(vars.out, &[c, h, w])?, inter))
}
