//! The six-stage encoder/decoder segmentation network.
//!
//! ```text
//! enc.1..3   conv3×3 + BN + ReLU
//! enc.4..6   conv3×3 + BN + ReLU, then a VFFM block
//!            2×2 average pool after stages 1–5
//! dec.6..4   VFFM block, then conv3×3 + BN + ReLU
//! dec.3..1   conv3×3 + BN + ReLU
//!            dec.i (i ≥ 2): conv C_i → C_{i−1}, bilinear 2× upsample, + enc.{i−1}
//!            dec.1: conv C_1 → C_1
//! head       conv1×1 C_1 → 1, sigmoid
//! ```

use crate::attention::{VfMode, DEFAULT_POOLED_LEN};
use crate::autograd::Var;
use crate::error::{contract, Error, Result};
use crate::fusion::{block_graph, BlockParams, Pooling, MASK_KERNEL};
use crate::nn::{BnMode, BnState, ConvParams};
use crate::params::{insert_bn, insert_conv, ModelWeights, Session};
use crate::tensor::{Float, Tensor};

pub const STAGES: usize = 6;
/// Stages (1-based) that carry a VFFM block, in encoder and decoder alike.
pub const VFFM_STAGES: std::ops::RangeInclusive<usize> = 4..=6;
/// Spatial sizes must be multiples of this (five 2× downsamples).
pub const SIZE_MULTIPLE: usize = 32;

/// Parameter count and FLOPs reported for the reference model.
pub const REFERENCE_PARAMS: f64 = 0.35e6;
pub const REFERENCE_GFLOPS: f64 = 0.494;

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkConfig {
    pub stage_channels: Vec<usize>,
    pub heads: usize,
    pub pooled_len: usize,
    pub input_channels: usize,
    pub input_size: usize,
    pub vf_mode: VfMode,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![8, 16, 24, 32, 48, 64],
            heads: 12,
            pooled_len: DEFAULT_POOLED_LEN,
            input_channels: 3,
            input_size: 256,
            vf_mode: VfMode::Factored,
        }
    }
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<()> {
        let ch = &self.stage_channels;
        if ch.len() != STAGES {
            return Err(Error::Config(format!("expected {STAGES} stage channel counts, got {}", ch.len())));
        }
        if let Some(&c) = ch.iter().find(|&&c| c == 0 || c % 2 != 0) {
            return Err(Error::Config(format!("stage channels must be even and positive, got {c}")));
        }
        if self.heads == 0 || self.pooled_len == 0 || self.input_channels == 0 {
            return Err(Error::Config("heads, pooled length and input channels must be >= 1".into()));
        }
        if self.input_size == 0 || !self.input_size.is_multiple_of(SIZE_MULTIPLE) {
            return Err(Error::Config(format!(
                "input size must be a positive multiple of {SIZE_MULTIPLE}, got {}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Channels entering stage `i` (1-based) of the encoder.
    fn enc_in(&self, i: usize) -> usize {
        if i == 1 {
            self.input_channels
        } else {
            self.stage_channels[i - 2]
        }
    }

    fn channels(&self, i: usize) -> usize {
        self.stage_channels[i - 1]
    }

    /// Output channels of the decoder convolution at stage `i`.
    fn dec_out(&self, i: usize) -> usize {
        self.stage_channels[i.max(2) - 2]
    }
}

fn layer_seed(seed: u64, index: u64) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index.wrapping_mul(1000))
}

/// Fresh weights for `cfg`. The same seed always gives the same weights.
pub fn build_network<T: Float>(cfg: &NetworkConfig, seed: u64) -> Result<ModelWeights<T>> {
    cfg.validate()?;
    let mut w = ModelWeights::new();
    let mut idx = 0u64;
    let mut next = || {
        idx += 1;
        layer_seed(seed, idx)
    };
    for i in 1..=STAGES {
        let c = cfg.channels(i);
        insert_conv(&mut w, &format!("enc.{i}.conv"), ConvParams::init(cfg.enc_in(i), c, 3, next())?)?;
        insert_bn(&mut w, &format!("enc.{i}.bn"), BnState::new(c)?)?;
        if VFFM_STAGES.contains(&i) {
            BlockParams::init(c, cfg.heads, cfg.pooled_len, next())?.insert_into(&mut w, &format!("enc.{i}.vffm"))?;
        }
    }
    for i in (1..=STAGES).rev() {
        let c = cfg.channels(i);
        if VFFM_STAGES.contains(&i) {
            BlockParams::init(c, cfg.heads, cfg.pooled_len, next())?.insert_into(&mut w, &format!("dec.{i}.vffm"))?;
        }
        let out = cfg.dec_out(i);
        insert_conv(&mut w, &format!("dec.{i}.conv"), ConvParams::init(c, out, 3, next())?)?;
        insert_bn(&mut w, &format!("dec.{i}.bn"), BnState::new(out)?)?;
    }
    insert_conv(&mut w, "head", ConvParams::init(cfg.channels(1), 1, 1, next())?)?;
    Ok(w)
}

fn conv_bn_relu<T: Float>(s: &mut Session<'_, T>, x: Var, prefix: &str) -> Result<Var> {
    let y = s.conv(x, &format!("{prefix}.conv"))?;
    let y = s.batchnorm(y, &format!("{prefix}.bn"))?;
    Ok(s.graph.relu(y))
}

/// Records the network on `x: [N, C_in, H, W]` and returns the
/// probabilities `[N, 1, H, W]`. Batch norm follows `s.mode`.
pub fn forward_graph<T: Float>(s: &mut Session<'_, T>, cfg: &NetworkConfig, x: Var) -> Result<Var> {
    let (_, c, h, w) = s.value(x).dims4()?;
    contract!(
        c == cfg.input_channels,
        "network expects {} input channels, got {c}",
        cfg.input_channels
    );
    contract!(
        h > 0 && w > 0 && h % SIZE_MULTIPLE == 0 && w % SIZE_MULTIPLE == 0,
        "input size must be a multiple of {SIZE_MULTIPLE}, got {h}×{w}"
    );
    let mut skips = Vec::with_capacity(STAGES);
    let mut cur = x;
    for i in 1..=STAGES {
        cur = conv_bn_relu(s, cur, &format!("enc.{i}"))?;
        if VFFM_STAGES.contains(&i) {
            cur = block_graph(s, cur, &format!("enc.{i}.vffm"), cfg.pooled_len, cfg.vf_mode, Pooling::Permissive)?;
        }
        skips.push(cur);
        if i < STAGES {
            cur = s.graph.avg_pool2d(cur)?;
        }
    }
    for i in (1..=STAGES).rev() {
        if VFFM_STAGES.contains(&i) {
            cur = block_graph(s, cur, &format!("dec.{i}.vffm"), cfg.pooled_len, cfg.vf_mode, Pooling::Permissive)?;
        }
        cur = conv_bn_relu(s, cur, &format!("dec.{i}"))?;
        if i >= 2 {
            let skip = skips[i - 2];
            let (sh, sw) = (s.value(skip).shape()[2], s.value(skip).shape()[3]);
            cur = s.graph.resize(cur, sh, sw)?;
            cur = s.graph.add(cur, skip)?;
        }
    }
    let logits = s.conv(cur, "head")?;
    Ok(s.graph.sigmoid(logits))
}

/// Evaluation-mode forward pass of `x: [N, C_in, H, W]`.
pub fn forward<T: Float>(weights: &ModelWeights<T>, cfg: &NetworkConfig, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut s = Session::new(weights, BnMode::Eval);
    let xv = s.input(x.clone());
    let out = forward_graph(&mut s, cfg, xv)?;
    Ok(s.graph.value(out).clone())
}

// ---------------------------------------------------------------------------
// Analytic cost model. Convolutions cost 2·k²·C_in·C_out per output pixel,
// matrix products 2·m·k·n, everything elementwise 1 per output element.

fn conv_flops(k: usize, c_in: usize, c_out: usize, hw: usize) -> u64 {
    (2 * k * k * c_in * c_out * hw) as u64
}

/// FLOPs of one Vision Fastformer on a `c×h×w` input.
pub fn vf_flops(c: usize, h: usize, w: usize, heads: usize, pooled_len: usize, mode: VfMode) -> u64 {
    let hw = h * w;
    let d = pooled_len.min(hw);
    let proj = conv_flops(1, c, heads, hw) * 2 + conv_flops(1, c, c, hw);
    // α softmax, weighted head sum, p = q⊙K, β softmax
    let scoring = (heads * hw + 2 * heads * hw + heads * hw + heads * hw) as u64;
    let key = (2 * heads * d + 2 * d * heads * d) as u64;
    let mix = match mode {
        VfMode::Naive => (hw * hw + 2 * c * hw * hw) as u64,
        VfMode::Factored => (2 * c * hw * d + 2 * c * d * d + 2 * c * d * hw) as u64,
    };
    proj + scoring + key + mix
}

fn pooled_dims(h: usize, w: usize) -> (usize, usize) {
    if h.is_multiple_of(2) && w.is_multiple_of(2) {
        (h / 2, w / 2)
    } else {
        (h, w)
    }
}

/// FLOPs of one VFFM block on a `c×h×w` input (network pooling rule).
pub fn block_flops(c: usize, h: usize, w: usize, heads: usize, pooled_len: usize, mode: VfMode) -> u64 {
    let hw = h * w;
    let (h2, w2) = pooled_dims(h, w);
    let (h3, w3) = pooled_dims(h2, w2);
    let mut f = vf_flops(c, h, w, heads, pooled_len, mode)
        + vf_flops(c, h2, w2, heads, pooled_len, mode)
        + vf_flops(c, h3, w3, heads, pooled_len, mode);
    if (h2, w2) != (h, w) {
        f += (c * h2 * w2) as u64;
    }
    if (h3, w3) != (h2, w2) {
        f += (c * h3 * w3) as u64;
    }
    f += [(h2, w2), (h3, w3)].iter().filter(|&&d| d != (h, w)).count() as u64 * (c * hw) as u64;
    // GF: mix, channel mean and max, mask conv, sigmoid, three products, two sums, residual product
    f += conv_flops(1, 3 * c, c, hw) + 2 * hw as u64 + conv_flops(MASK_KERNEL, 2, 3, hw) + 3 * hw as u64;
    f += 6 * (c * hw) as u64;
    // CF: x2 + x3, spatial mean, fc1, bn, relu, fc2, sigmoid, 1 − W1, two products and a sum
    let half = c / 2;
    f += (c * hw) as u64 + c as u64;
    f += conv_flops(1, c, half, 1) + 2 * half as u64 + conv_flops(1, half, c, 1) + 2 * c as u64;
    f += 3 * (c * hw) as u64;
    // GF + CF
    f + (c * hw) as u64
}

fn conv_bn_relu_flops(c_in: usize, c_out: usize, hw: usize) -> u64 {
    conv_flops(3, c_in, c_out, hw) + 2 * (c_out * hw) as u64
}

/// Per-stage cost at `cfg.input_size`, in forward order.
pub fn stage_flops(cfg: &NetworkConfig) -> Result<Vec<(String, u64)>> {
    cfg.validate()?;
    let mut out = Vec::new();
    let mut size = cfg.input_size;
    let mut sizes = Vec::new();
    for i in 1..=STAGES {
        let c = cfg.channels(i);
        let hw = size * size;
        let mut f = conv_bn_relu_flops(cfg.enc_in(i), c, hw);
        if VFFM_STAGES.contains(&i) {
            f += block_flops(c, size, size, cfg.heads, cfg.pooled_len, cfg.vf_mode);
        }
        sizes.push(size);
        if i < STAGES {
            size /= 2;
            f += (c * size * size) as u64;
        }
        out.push((format!("enc.{i}"), f));
    }
    for i in (1..=STAGES).rev() {
        let c = cfg.channels(i);
        let s = sizes[i - 1];
        let mut f = 0;
        if VFFM_STAGES.contains(&i) {
            f += block_flops(c, s, s, cfg.heads, cfg.pooled_len, cfg.vf_mode);
        }
        let o = cfg.dec_out(i);
        f += conv_bn_relu_flops(c, o, s * s);
        if i >= 2 {
            let up = sizes[i - 2];
            f += 2 * (o * up * up) as u64;
        }
        out.push((format!("dec.{i}"), f));
    }
    let hw = cfg.input_size * cfg.input_size;
    out.push(("head".into(), conv_flops(1, cfg.channels(1), 1, hw) + hw as u64));
    Ok(out)
}

pub fn count_flops(cfg: &NetworkConfig) -> Result<u64> {
    Ok(stage_flops(cfg)?.iter().map(|(_, f)| f).sum())
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageSummary {
    pub name: String,
    pub params: usize,
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub total_params: usize,
    pub flops: u64,
    pub stages: Vec<StageSummary>,
}

impl Summary {
    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }
}

pub fn summarize<T: Float>(cfg: &NetworkConfig, weights: &ModelWeights<T>) -> Result<Summary> {
    let stages: Vec<StageSummary> = stage_flops(cfg)?
        .into_iter()
        .map(|(name, flops)| {
            let prefix = if name == "head" { "head.".to_string() } else { format!("{name}.") };
            StageSummary {
                params: weights.count_params_with_prefix(&prefix),
                name,
                flops,
            }
        })
        .collect();
    let summary = Summary {
        total_params: weights.count_params(),
        flops: stages.iter().map(|s| s.flops).sum(),
        stages,
    };
    let listed: usize = summary.stages.iter().map(|s| s.params).sum();
    if listed != summary.total_params {
        return Err(Error::Config(format!(
            "weights hold {} parameters outside the network layout",
            summary.total_params - listed
        )));
    }
    Ok(summary)
}
