//! Independent oracles and helpers shared by the integration tests.
#![allow(dead_code)]

use std::path::Path;

use vffm::network::NetworkConfig;
use vffm::train::metrics::{ConfusionCounts, MetricsReport};

// Parameter counts, layer by layer. A k×k convolution has k²·in·out
// weights plus out biases; batch norm has a scale and a shift per channel.

pub fn conv_params(k: usize, c_in: usize, c_out: usize) -> usize {
    k * k * c_in * c_out + c_out
}

pub fn bn_params(c: usize) -> usize {
    2 * c
}

/// Query and key projections to one score per head, value projection C → C.
pub fn vf_params(c: usize, heads: usize) -> usize {
    2 * conv_params(1, c, heads) + conv_params(1, c, c)
}

/// Three attention modules, the 3C → C mix and 7×7 mask convolutions, and
/// the C → C/2 → C gate with its batch norm.
pub fn block_params(c: usize, heads: usize) -> usize {
    3 * vf_params(c, heads)
        + conv_params(1, 3 * c, c)
        + conv_params(7, 2, 3)
        + conv_params(1, c, c / 2)
        + bn_params(c / 2)
        + conv_params(1, c / 2, c)
}

fn has_block(stage: usize) -> bool {
    (4..=6).contains(&stage)
}

pub fn network_params(cfg: &NetworkConfig) -> usize {
    let ch = &cfg.stage_channels;
    let mut total = 0;
    for i in 1..=6 {
        let c_in = if i == 1 { cfg.input_channels } else { ch[i - 2] };
        let c = ch[i - 1];
        total += conv_params(3, c_in, c) + bn_params(c);
        if has_block(i) {
            total += 2 * block_params(c, cfg.heads);
        }
        let out = if i == 1 { ch[0] } else { ch[i - 2] };
        total += conv_params(3, c, out) + bn_params(out);
    }
    total + conv_params(1, ch[0], 1)
}

// FLOPs: 2·k²·in·out per output pixel for a convolution, 2·m·k·n for a
// matrix product, 1 per output element for everything else.

fn conv_flops(k: usize, c_in: usize, c_out: usize, pixels: usize) -> u64 {
    (2 * k * k * c_in * c_out * pixels) as u64
}

pub fn vf_flops(c: usize, pixels: usize, heads: usize, d: usize, naive: bool) -> u64 {
    let d = d.min(pixels);
    let (n, h) = (pixels as u64, heads as u64);
    let (c64, d64) = (c as u64, d as u64);
    let projections = 2 * conv_flops(1, c, heads, pixels) + conv_flops(1, c, c, pixels);
    // α softmax (1), Σ α·q (2), p = q⊙k (1), β softmax (1)
    let scores = 5 * h * n;
    // pool p and β to d, then Σ over heads of a d×1 by 1×d product
    let key = 2 * h * d64 + 2 * d64 * h * d64;
    let mix = if naive {
        n * n + 2 * c64 * n * n
    } else {
        2 * c64 * n * d64 + 2 * c64 * d64 * d64 + 2 * c64 * d64 * n
    };
    projections + scores + key + mix
}

/// One block on a `c×side×side` map with `side` divisible by 4.
pub fn block_flops(c: usize, side: usize, heads: usize, d: usize) -> u64 {
    assert_eq!(side % 4, 0);
    let n = side * side;
    let (n2, n3) = (n / 4, n / 16);
    let (c64, n64) = (c as u64, n as u64);
    let half = c / 2;
    let attention = vf_flops(c, n, heads, d, false) + vf_flops(c, n2, heads, d, false) + vf_flops(c, n3, heads, d, false);
    // two average pools, two upsamples back to full size
    let resampling = (c * n2 + c * n3) as u64 + 2 * c64 * n64;
    let gf = conv_flops(1, 3 * c, c, n) + 2 * n64 + conv_flops(7, 2, 3, n) + 3 * n64 + 6 * c64 * n64;
    let cf = c64 * n64 + c64 + conv_flops(1, c, half, 1) + 2 * half as u64 + conv_flops(1, half, c, 1) + 2 * c64 + 3 * c64 * n64;
    attention + resampling + gf + cf + c64 * n64
}

pub fn network_flops(cfg: &NetworkConfig) -> u64 {
    let ch = &cfg.stage_channels;
    let side = |i: usize| cfg.input_size >> (i - 1);
    let mut total = 0u64;
    for i in 1..=6 {
        let c_in = if i == 1 { cfg.input_channels } else { ch[i - 2] };
        let c = ch[i - 1];
        let n = side(i) * side(i);
        total += conv_flops(3, c_in, c, n) + 2 * (c * n) as u64;
        if has_block(i) {
            // once in the encoder, once in the decoder
            total += 2 * block_flops(c, side(i), cfg.heads, cfg.pooled_len);
        }
        if i < 6 {
            total += (c * n / 4) as u64;
        }
        let out = if i == 1 { ch[0] } else { ch[i - 2] };
        total += conv_flops(3, c, out, n) + 2 * (out * n) as u64;
        if i >= 2 {
            let up = side(i - 1) * side(i - 1);
            total += 2 * (out * up) as u64;
        }
    }
    let n = cfg.input_size * cfg.input_size;
    total + conv_flops(1, ch[0], 1, n) + n as u64
}

/// Pixel-by-pixel confusion counts and metrics with plain loops.
pub fn brute_force_metrics(pred: &[bool], target: &[bool]) -> (ConfusionCounts, MetricsReport) {
    let mut c = ConfusionCounts::default();
    for (&p, &t) in pred.iter().zip(target) {
        match (p, t) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    // an empty denominator means there was nothing to get wrong
    let ratio = |num: u64, den: u64| if den == 0 { 1.0 } else { num as f64 / den as f64 };
    let m = MetricsReport {
        miou: ratio(c.tp, c.tp + c.fp + c.fn_),
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        acc: ratio(c.tp + c.tn, c.tp + c.tn + c.fp + c.fn_),
        sen: ratio(c.tp, c.tp + c.fn_),
        spe: ratio(c.tn, c.tn + c.fp),
    };
    (c, m)
}

/// The small network every CLI test trains.
pub const TINY_NET: [&str; 8] = [
    "--set",
    "stage_channels=4,4,4,4,4,4",
    "--set",
    "heads=2",
    "--set",
    "pooled_len=8",
    "--set",
    "input_size=32",
];

pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

/// Runs the command line in-process.
pub fn run_cli(args: &[&str]) -> CliOutput {
    let mut out = Vec::new();
    let mut err = Vec::new();
    let argv = std::iter::once("vffm").chain(args.iter().copied());
    let code = vffm::cli::run(argv, &mut out, &mut err);
    CliOutput {
        code,
        stdout: String::from_utf8(out).expect("utf-8 stdout"),
        stderr: String::from_utf8(err).expect("utf-8 stderr"),
    }
}

pub fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 temp path")
}
