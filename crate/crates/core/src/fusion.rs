//! The VFFM block: three Vision Fastformers at decreasing resolution, fused
//! by a spatial mask (GF) and a channel gate (CF).
//!
//! ```text
//! x1 = VF(x)                 pixel level
//! y2 = VF(AP(x1))            patch level, x2 = resize(y2)
//! y3 = VF(AP(y2))            window level, x3 = resize(y3)
//!
//! GF:  U = mix(x1 ‖ x2 ‖ x3), P = mean_c(U) ‖ max_c(U)
//!      M1, M2, M3 = σ(mask(P)),  out = (x1·M1 + x2·M2 + x3·M3)·x
//! CF:  Y = mean_hw(x2 + x3), Z = fc2(relu(bn(fc1(Y))))
//!      W1 = σ(Z), W2 = 1 − W1,   out = x2·W1 + x3·W2
//!
//! block(x) = GF + CF
//! ```
//!
//! `AP` is 2×2 stride-2 average pooling.

use crate::attention::{vf_graph, VfMode, VfParams};
use crate::autograd::Var;
use crate::error::{contract, shape_err, Result};
use crate::nn::{BnMode, BnState, ConvParams};
use crate::params::{insert_bn, insert_conv, read_bn, read_conv, ModelWeights, Session};
use crate::tensor::{Float, Tensor};

/// Kernel size of the mask convolution in GF.
pub const MASK_KERNEL: usize = 7;

/// How the granularity pooling treats spatial sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pooling {
    /// `H` and `W` must be divisible by 4.
    Strict,
    /// Pool only while both sizes are even; otherwise the level reuses the
    /// previous resolution. Lets the deepest network stages run on small
    /// inputs.
    Permissive,
}

/// The three granularity maps, each `C×H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct GranularityMaps<T> {
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
    pub x3: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GfParams<T> {
    /// 1×1, `3C → C`
    pub mix: ConvParams<T>,
    /// 7×7, `2 → 3`
    pub mask: ConvParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfParams<T> {
    /// 1×1, `C → C/2`
    pub fc1: ConvParams<T>,
    pub bn: BnState<T>,
    /// 1×1, `C/2 → C`
    pub fc2: ConvParams<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockParams<T> {
    pub pivf: VfParams<T>,
    pub pavf: VfParams<T>,
    pub wivf: VfParams<T>,
    pub gf: GfParams<T>,
    pub cf: CfParams<T>,
}

impl<T: Float> BlockParams<T> {
    pub fn init(channels: usize, heads: usize, pooled_len: usize, seed: u64) -> Result<Self> {
        contract!(
            channels >= 2 && channels.is_multiple_of(2),
            "VFFM block needs an even channel count, got {channels}"
        );
        Ok(Self {
            pivf: VfParams::init(channels, heads, pooled_len, seed)?,
            pavf: VfParams::init(channels, heads, pooled_len, seed.wrapping_add(10))?,
            wivf: VfParams::init(channels, heads, pooled_len, seed.wrapping_add(20))?,
            gf: GfParams {
                mix: ConvParams::init(3 * channels, channels, 1, seed.wrapping_add(30))?,
                mask: ConvParams::init(2, 3, MASK_KERNEL, seed.wrapping_add(31))?,
            },
            cf: CfParams {
                fc1: ConvParams::init(channels, channels / 2, 1, seed.wrapping_add(40))?,
                bn: BnState::new(channels / 2)?,
                fc2: ConvParams::init(channels / 2, channels, 1, seed.wrapping_add(41))?,
            },
        })
    }

    /// Every weight and bias zero; batch norm at its identity state.
    pub fn zeros(channels: usize, heads: usize, pooled_len: usize) -> Result<Self> {
        contract!(
            channels >= 2 && channels.is_multiple_of(2),
            "VFFM block needs an even channel count, got {channels}"
        );
        Ok(Self {
            pivf: VfParams::zeros(channels, heads, pooled_len)?,
            pavf: VfParams::zeros(channels, heads, pooled_len)?,
            wivf: VfParams::zeros(channels, heads, pooled_len)?,
            gf: GfParams {
                mix: ConvParams::zeros(3 * channels, channels, 1)?,
                mask: ConvParams::zeros(2, 3, MASK_KERNEL)?,
            },
            cf: CfParams {
                fc1: ConvParams::zeros(channels, channels / 2, 1)?,
                bn: BnState::new(channels / 2)?,
                fc2: ConvParams::zeros(channels / 2, channels, 1)?,
            },
        })
    }

    pub fn channels(&self) -> usize {
        self.pivf.channels()
    }

    pub fn pooled_len(&self) -> usize {
        self.pivf.pooled_len
    }

    pub fn insert_into(&self, w: &mut ModelWeights<T>, prefix: &str) -> Result<()> {
        self.pivf.insert_into(w, &format!("{prefix}.pivf"))?;
        self.pavf.insert_into(w, &format!("{prefix}.pavf"))?;
        self.wivf.insert_into(w, &format!("{prefix}.wivf"))?;
        insert_conv(w, &format!("{prefix}.gf.mix"), self.gf.mix.clone())?;
        insert_conv(w, &format!("{prefix}.gf.mask"), self.gf.mask.clone())?;
        insert_conv(w, &format!("{prefix}.cf.fc1"), self.cf.fc1.clone())?;
        insert_bn(w, &format!("{prefix}.cf.bn"), self.cf.bn.clone())?;
        insert_conv(w, &format!("{prefix}.cf.fc2"), self.cf.fc2.clone())
    }

    pub fn from_weights(w: &ModelWeights<T>, prefix: &str, pooled_len: usize) -> Result<Self> {
        Ok(Self {
            pivf: VfParams::from_weights(w, &format!("{prefix}.pivf"), pooled_len)?,
            pavf: VfParams::from_weights(w, &format!("{prefix}.pavf"), pooled_len)?,
            wivf: VfParams::from_weights(w, &format!("{prefix}.wivf"), pooled_len)?,
            gf: GfParams {
                mix: read_conv(w, &format!("{prefix}.gf.mix"))?,
                mask: read_conv(w, &format!("{prefix}.gf.mask"))?,
            },
            cf: CfParams {
                fc1: read_conv(w, &format!("{prefix}.cf.fc1"))?,
                bn: read_bn(w, &format!("{prefix}.cf.bn"))?,
                fc2: read_conv(w, &format!("{prefix}.cf.fc2"))?,
            },
        })
    }

    /// The block's parameters under the prefix `block`.
    pub fn to_weights(&self) -> Result<ModelWeights<T>> {
        let mut w = ModelWeights::new();
        self.insert_into(&mut w, BLOCK_PREFIX)?;
        Ok(w)
    }
}

/// Prefix used by the single-block helpers in this module.
pub const BLOCK_PREFIX: &str = "block";

// ---------------------------------------------------------------------------
// Tape implementation on `[N, C, H, W]`.

/// The three granularity maps as graph nodes.
#[derive(Debug, Clone, Copy)]
pub struct MapVars {
    pub x1: Var,
    pub x2: Var,
    pub x3: Var,
}

fn check_strict(h: usize, w: usize) -> Result<()> {
    contract!(
        h.is_multiple_of(4) && w.is_multiple_of(4),
        "multi-granularity attention needs H and W divisible by 4, got {h}×{w}"
    );
    Ok(())
}

fn pool_level<T: Float>(s: &mut Session<'_, T>, x: Var, pooling: Pooling) -> Result<Var> {
    let (_, _, h, w) = s.value(x).dims4()?;
    match pooling {
        Pooling::Permissive if h % 2 != 0 || w % 2 != 0 => Ok(x),
        _ => s.graph.avg_pool2d(x),
    }
}

fn resize_to<T: Float>(s: &mut Session<'_, T>, x: Var, h: usize, w: usize) -> Result<Var> {
    let shape = s.value(x).shape();
    if shape[2] == h && shape[3] == w {
        return Ok(x);
    }
    s.graph.resize(x, h, w)
}

pub fn mgvf_graph<T: Float>(
    s: &mut Session<'_, T>,
    x: Var,
    prefix: &str,
    pooled_len: usize,
    mode: VfMode,
    pooling: Pooling,
) -> Result<MapVars> {
    let (_, _, h, w) = s.value(x).dims4()?;
    if pooling == Pooling::Strict {
        check_strict(h, w)?;
    }
    let x1 = vf_graph(s, x, &format!("{prefix}.pivf"), pooled_len, mode)?.out;
    let p2 = pool_level(s, x1, pooling)?;
    let y2 = vf_graph(s, p2, &format!("{prefix}.pavf"), pooled_len, mode)?.out;
    let p3 = pool_level(s, y2, pooling)?;
    let y3 = vf_graph(s, p3, &format!("{prefix}.wivf"), pooled_len, mode)?.out;
    let x2 = resize_to(s, y2, h, w)?;
    let x3 = resize_to(s, y3, h, w)?;
    Ok(MapVars { x1, x2, x3 })
}

/// Returns the mask tensor `[N, 3, H, W]` and the GF output.
pub fn gf_graph<T: Float>(s: &mut Session<'_, T>, m: MapVars, x: Var, prefix: &str) -> Result<(Var, Var)> {
    let cat = s.graph.concat(&[m.x1, m.x2, m.x3], 1)?;
    let u = s.conv(cat, &format!("{prefix}.gf.mix"))?;
    let avg = s.graph.mean_axes(u, &[1])?;
    let max = s.graph.max_axis(u, 1)?;
    let pooled = s.graph.concat(&[avg, max], 1)?;
    let logits = s.conv(pooled, &format!("{prefix}.gf.mask"))?;
    let masks = s.graph.sigmoid(logits);
    let g = &mut s.graph;
    let mut acc = None;
    for (i, xi) in [m.x1, m.x2, m.x3].into_iter().enumerate() {
        let mi = g.narrow(masks, 1, i, 1)?;
        let term = g.mul(xi, mi)?;
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let out = g.mul(acc.expect("three terms"), x)?;
    Ok((masks, out))
}

/// Returns `W1`, `W2` (each `[N, C, 1, 1]`) and the CF output.
pub fn cf_graph<T: Float>(s: &mut Session<'_, T>, m: MapVars, prefix: &str) -> Result<(Var, Var, Var)> {
    let sum = s.graph.add(m.x2, m.x3)?;
    let y = s.graph.mean_axes(sum, &[2, 3])?;
    let z = s.conv(y, &format!("{prefix}.cf.fc1"))?;
    let z = s.batchnorm(z, &format!("{prefix}.cf.bn"))?;
    let z = s.graph.relu(z);
    let z = s.conv(z, &format!("{prefix}.cf.fc2"))?;
    let g = &mut s.graph;
    let w1 = g.sigmoid(z);
    let w2 = g.one_minus(w1);
    let a = g.mul(m.x2, w1)?;
    let b = g.mul(m.x3, w2)?;
    let out = g.add(a, b)?;
    Ok((w1, w2, out))
}

/// Records one VFFM block on `x: [N, C, H, W]`.
pub fn block_graph<T: Float>(
    s: &mut Session<'_, T>,
    x: Var,
    prefix: &str,
    pooled_len: usize,
    mode: VfMode,
    pooling: Pooling,
) -> Result<Var> {
    let c = s.value(x).shape()[1];
    contract!(c.is_multiple_of(2), "VFFM block needs an even channel count, got {c}");
    let maps = mgvf_graph(s, x, prefix, pooled_len, mode, pooling)?;
    let (_, gf) = gf_graph(s, maps, x, prefix)?;
    let (_, _, cf) = cf_graph(s, maps, prefix)?;
    s.graph.add(gf, cf)
}

// ---------------------------------------------------------------------------
// Single-image API on `C×H×W`.

fn lift<T: Float>(x: &Tensor<T>) -> Result<Tensor<T>> {
    match *x.shape() {
        [c, h, w] => x.reshape(&[1, c, h, w]),
        _ => Err(shape_err!("expected C×H×W, got {:?}", x.shape())),
    }
}

fn drop_batch<T: Float>(t: &Tensor<T>) -> Result<Tensor<T>> {
    t.reshape(&t.shape()[1..])
}

fn maps_session<'w, T: Float>(
    weights: &'w ModelWeights<T>,
    x: &Tensor<T>,
    b: &BlockParams<T>,
    mode: VfMode,
) -> Result<(Session<'w, T>, Var, MapVars)> {
    let mut s = Session::new(weights, BnMode::Eval);
    let xv = s.input(lift(x)?);
    let maps = mgvf_graph(&mut s, xv, BLOCK_PREFIX, b.pooled_len(), mode, Pooling::Strict)?;
    Ok((s, xv, maps))
}

fn maps_value<T: Float>(s: &Session<'_, T>, m: MapVars) -> Result<GranularityMaps<T>> {
    Ok(GranularityMaps {
        x1: drop_batch(s.value(m.x1))?,
        x2: drop_batch(s.value(m.x2))?,
        x3: drop_batch(s.value(m.x3))?,
    })
}

/// The three granularity maps of `x: C×H×W`; `H` and `W` must be divisible
/// by 4.
pub fn mgvf_forward<T: Float>(x: &Tensor<T>, b: &BlockParams<T>, mode: VfMode) -> Result<GranularityMaps<T>> {
    let w = b.to_weights()?;
    let (s, _, maps) = maps_session(&w, x, b, mode)?;
    maps_value(&s, maps)
}

fn check_maps<T: Float>(g: &GranularityMaps<T>) -> Result<(usize, usize, usize)> {
    let (c, h, w) = g.x1.dims3()?;
    if g.x2.shape() != g.x1.shape() || g.x3.shape() != g.x1.shape() {
        return Err(shape_err!(
            "granularity maps disagree: {:?}, {:?}, {:?}",
            g.x1.shape(),
            g.x2.shape(),
            g.x3.shape()
        ));
    }
    Ok((c, h, w))
}

/// Spatial fusion masks `M1, M2, M3`, each `1×H×W`.
pub fn gf_masks<T: Float>(g: &GranularityMaps<T>, p: &GfParams<T>) -> Result<[Tensor<T>; 3]> {
    let (c, h, w) = check_maps(g)?;
    let mut weights = ModelWeights::new();
    insert_conv(&mut weights, "x.gf.mix", p.mix.clone())?;
    insert_conv(&mut weights, "x.gf.mask", p.mask.clone())?;
    let mut s = Session::new(&weights, BnMode::Eval);
    let maps = MapVars {
        x1: s.input(lift(&g.x1)?),
        x2: s.input(lift(&g.x2)?),
        x3: s.input(lift(&g.x3)?),
    };
    let ones = s.input(Tensor::ones(&[1, c, h, w])?);
    let (masks, _) = gf_graph(&mut s, maps, ones, "x")?;
    let m = s.value(masks).reshape(&[3, h, w])?;
    Ok([0, 1, 2].map(|i| m.narrow(0, i, 1).expect("three mask channels")))
}

/// `(x1·M1 + x2·M2 + x3·M3)·x` with the `1×H×W` masks broadcast over
/// channels.
pub fn gf_combine<T: Float>(g: &GranularityMaps<T>, masks: &[Tensor<T>; 3], x: &Tensor<T>) -> Result<Tensor<T>> {
    check_maps(g)?;
    let sum = g
        .x1
        .mul(&masks[0])?
        .add(&g.x2.mul(&masks[1])?)?
        .add(&g.x3.mul(&masks[2])?)?;
    if sum.shape() != g.x1.shape() {
        return Err(shape_err!("masks {:?} do not broadcast over {:?}", masks[0].shape(), g.x1.shape()));
    }
    let out = sum.mul(x)?;
    if out.shape() != g.x1.shape() {
        return Err(shape_err!("residual {:?} vs maps {:?}", x.shape(), g.x1.shape()));
    }
    Ok(out)
}

/// Channel gates `W1 = σ(Z)` and `W2 = 1 − W1`, each `C×1×1`. Batch norm
/// runs with the stored running statistics.
pub fn cf_weights<T: Float>(g: &GranularityMaps<T>, p: &CfParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    let (c, _, _) = check_maps(g)?;
    let mut weights = ModelWeights::new();
    insert_conv(&mut weights, "x.cf.fc1", p.fc1.clone())?;
    insert_bn(&mut weights, "x.cf.bn", p.bn.clone())?;
    insert_conv(&mut weights, "x.cf.fc2", p.fc2.clone())?;
    let mut s = Session::new(&weights, BnMode::Eval);
    let maps = MapVars {
        x1: s.input(lift(&g.x1)?),
        x2: s.input(lift(&g.x2)?),
        x3: s.input(lift(&g.x3)?),
    };
    let (w1, w2, _) = cf_graph(&mut s, maps, "x")?;
    Ok((s.value(w1).reshape(&[c, 1, 1])?, s.value(w2).reshape(&[c, 1, 1])?))
}

/// `x2·W1 + x3·W2` with the `C×1×1` gates broadcast spatially.
pub fn cf_combine<T: Float>(g: &GranularityMaps<T>, w1: &Tensor<T>, w2: &Tensor<T>) -> Result<Tensor<T>> {
    check_maps(g)?;
    let out = g.x2.mul(w1)?.add(&g.x3.mul(w2)?)?;
    if out.shape() != g.x2.shape() {
        return Err(shape_err!("gates {:?} do not broadcast over {:?}", w1.shape(), g.x2.shape()));
    }
    Ok(out)
}

/// One VFFM block on `x: C×H×W` (evaluation-mode batch norm).
pub fn vffm_block_forward<T: Float>(x: &Tensor<T>, b: &BlockParams<T>, mode: VfMode) -> Result<Tensor<T>> {
    let w = b.to_weights()?;
    let mut s = Session::new(&w, BnMode::Eval);
    let xv = s.input(lift(x)?);
    let out = block_graph(&mut s, xv, BLOCK_PREFIX, b.pooled_len(), mode, Pooling::Strict)?;
    drop_batch(s.value(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Init;

    fn rand(shape: &[usize], seed: u64) -> Tensor<f64> {
        Tensor::random(shape, seed, Init::Normal(1.0)).unwrap()
    }

    fn maps(c: usize, h: usize, w: usize, seed: u64) -> GranularityMaps<f64> {
        GranularityMaps {
            x1: rand(&[c, h, w], seed),
            x2: rand(&[c, h, w], seed + 1),
            x3: rand(&[c, h, w], seed + 2),
        }
    }

    #[test]
    fn mgvf_shapes_and_zeros() {
        let b = BlockParams::<f64>::init(4, 2, 8, 1).unwrap();
        let g = mgvf_forward(&rand(&[4, 16, 16], 2), &b, VfMode::Factored).unwrap();
        for m in [&g.x1, &g.x2, &g.x3] {
            assert_eq!(m.shape(), &[4, 16, 16]);
        }
        let z = BlockParams::<f64>::zeros(4, 2, 8).unwrap();
        let g = mgvf_forward(&rand(&[4, 16, 16], 3), &z, VfMode::Naive).unwrap();
        assert!([g.x1, g.x2, g.x3].iter().all(|m| m.data().iter().all(|&v| v == 0.0)));
        assert!(mgvf_forward(&rand(&[4, 10, 16], 3), &b, VfMode::Naive).is_err());
    }

    #[test]
    fn mgvf_constant_field() {
        // Zero weights with unit query/key biases give α = β = 1 and an
        // all-ones global key, so every output equals HW times the value bias.
        let mut b = BlockParams::<f64>::zeros(2, 1, 4).unwrap();
        for vf in [&mut b.pivf, &mut b.pavf, &mut b.wivf] {
            vf.wq.bias = Tensor::ones(&[1]).unwrap();
            vf.wk.bias = Tensor::ones(&[1]).unwrap();
            vf.wv.bias = Tensor::full(&[2], 0.5).unwrap();
        }
        let g = mgvf_forward(&Tensor::zeros(&[2, 8, 8]).unwrap(), &b, VfMode::Factored).unwrap();
        for (m, want) in [(&g.x1, 32.0), (&g.x2, 8.0), (&g.x3, 2.0)] {
            assert!(m.data().iter().all(|&v| (v - want).abs() < 1e-9), "{want}");
        }
    }

    #[test]
    fn gf_mask_examples() {
        let g = maps(3, 8, 8, 4);
        let mut p = GfParams {
            mix: ConvParams::init(9, 3, 1, 5).unwrap(),
            mask: ConvParams::zeros(2, 3, MASK_KERNEL).unwrap(),
        };
        let m = gf_masks(&g, &p).unwrap();
        assert!(m.iter().all(|t| t.shape() == [1, 8, 8] && t.data().iter().all(|&v| v == 0.5)));
        p.mask.bias = Tensor::from_f64(&[3], &[40.0, -40.0, 0.0]).unwrap();
        let m = gf_masks(&g, &p).unwrap();
        assert!(m[0].data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(m[1].data().iter().all(|&v| v < 1e-12));
        assert!(m[2].data().iter().all(|&v| v == 0.5));
        p.mask = ConvParams::init(2, 3, MASK_KERNEL, 6).unwrap();
        let m = gf_masks(&g, &p).unwrap();
        assert!(m.iter().all(|t| t.data().iter().all(|&v| v > 0.0 && v < 1.0)));
    }

    #[test]
    fn gf_combine_examples() {
        let g = maps(3, 4, 4, 7);
        let one = Tensor::ones(&[1, 4, 4]).unwrap();
        let zero = Tensor::zeros(&[1, 4, 4]).unwrap();
        let x = Tensor::ones(&[3, 4, 4]).unwrap();
        let out = gf_combine(&g, &[one.clone(), zero.clone(), zero.clone()], &x).unwrap();
        assert_eq!(out, g.x1);
        let out = gf_combine(&g, &[zero.clone(), zero.clone(), zero], &rand(&[3, 4, 4], 8)).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        let two = Tensor::full(&[3, 4, 4], 2.0).unwrap();
        let twos = GranularityMaps { x1: two.clone(), x2: two.clone(), x3: two.clone() };
        let half = Tensor::full(&[1, 4, 4], 0.5).unwrap();
        let out = gf_combine(&twos, &[half.clone(), half.clone(), half], &two).unwrap();
        assert!(out.data().iter().all(|&v| v == 6.0));
    }

    #[test]
    fn cf_examples() {
        let g = maps(4, 4, 4, 9);
        let mut p = CfParams {
            fc1: ConvParams::init(4, 2, 1, 10).unwrap(),
            bn: BnState::new(2).unwrap(),
            fc2: ConvParams::zeros(2, 4, 1).unwrap(),
        };
        let (w1, w2) = cf_weights(&g, &p).unwrap();
        assert_eq!(w1.shape(), &[4, 1, 1]);
        assert!(w1.data().iter().chain(w2.data()).all(|&v| v == 0.5));
        p.fc2.bias = Tensor::full(&[4], 40.0).unwrap();
        let (w1, w2) = cf_weights(&g, &p).unwrap();
        assert!(w1.data().iter().all(|&v| (v - 1.0).abs() < 1e-12));
        assert!(w2.data().iter().all(|&v| v < 1e-12));
        p.fc2 = ConvParams::init(2, 4, 1, 11).unwrap();
        let (w1, w2) = cf_weights(&g, &p).unwrap();
        assert!(w1.data().iter().zip(w2.data()).all(|(&a, &b)| a + b == 1.0));

        let one = Tensor::ones(&[4, 1, 1]).unwrap();
        let zero = Tensor::zeros(&[4, 1, 1]).unwrap();
        assert_eq!(cf_combine(&g, &one, &zero).unwrap(), g.x2);
        let half = Tensor::full(&[4, 1, 1], 0.5).unwrap();
        let avg = g.x2.add(&g.x3).unwrap().scale(0.5);
        assert!(cf_combine(&g, &half, &half).unwrap().rel_linf(&avg, 1e-30).unwrap() < 1e-15);
        let same = GranularityMaps { x1: g.x1.clone(), x2: g.x2.clone(), x3: g.x2.clone() };
        let out = cf_combine(&same, &w1, &w2).unwrap();
        assert!(out.rel_linf(&g.x2, 1e-30).unwrap() < 1e-15);
    }

    #[test]
    fn block_is_gf_plus_cf() {
        let b = BlockParams::<f64>::init(4, 3, 8, 12).unwrap();
        let x = rand(&[4, 8, 8], 13);
        let out = vffm_block_forward(&x, &b, VfMode::Factored).unwrap();
        let g = mgvf_forward(&x, &b, VfMode::Factored).unwrap();
        let masks = gf_masks(&g, &b.gf).unwrap();
        let (w1, w2) = cf_weights(&g, &b.cf).unwrap();
        let want = gf_combine(&g, &masks, &x)
            .unwrap()
            .add(&cf_combine(&g, &w1, &w2).unwrap())
            .unwrap();
        assert!(out.rel_linf(&want, 1e-30).unwrap() < 1e-12);

        let naive = vffm_block_forward(&x, &b, VfMode::Naive).unwrap();
        assert!(naive.rel_linf(&out, 1e-30).unwrap() < 1e-10);

        let z = BlockParams::<f64>::zeros(4, 3, 8).unwrap();
        assert!(vffm_block_forward(&x, &z, VfMode::Naive).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permissive_pooling_skips_odd_sizes() {
        let b = BlockParams::<f64>::init(4, 2, 8, 14).unwrap();
        let w = b.to_weights().unwrap();
        let mut s = Session::new(&w, BnMode::Eval);
        let x = s.input(rand(&[1, 4, 2, 2], 15));
        let out = block_graph(&mut s, x, BLOCK_PREFIX, 8, VfMode::Factored, Pooling::Permissive).unwrap();
        assert_eq!(s.value(out).shape(), &[1, 4, 2, 2]);
        let mut s = Session::new(&w, BnMode::Eval);
        let x = s.input(rand(&[1, 4, 2, 2], 15));
        assert!(block_graph(&mut s, x, BLOCK_PREFIX, 8, VfMode::Factored, Pooling::Strict).is_err());
    }
}
