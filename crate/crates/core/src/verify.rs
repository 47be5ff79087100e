//! Analytic-versus-numeric gradient checks on small instances of each
//! building block and of the whole network.

use std::collections::BTreeMap;
use std::fmt;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{vf_graph, VfMode, VfParams};
use crate::autograd::{Fault, Var};
use crate::error::{Error, Result};
use crate::fusion::{block_graph, cf_graph, gf_graph, BlockParams, MapVars, Pooling};
use crate::gradcheck::{rel_error, REL_FLOOR};
use crate::network::{build_network, forward_graph, NetworkConfig};
use crate::nn::BnMode;
use crate::params::{is_buffer, ModelWeights, Session};
use crate::tensor::{positive, Init, Tensor};
use crate::train::trainer::combined_loss_graph;

/// Largest relative error a check may report and still pass.
pub const GRAD_TOLERANCE: f64 = 1e-5;
/// Default central-difference step.
pub const DEFAULT_EPS: f64 = 1e-5;
/// Coordinates probed per tensor for the network target.
const NET_COORDS_PER_TENSOR: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradTarget {
    Vf,
    Gf,
    Cf,
    Block,
    Net,
}

impl GradTarget {
    pub const ALL: [GradTarget; 5] = [Self::Vf, Self::Gf, Self::Cf, Self::Block, Self::Net];
}

impl std::str::FromStr for GradTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "vf" => Self::Vf,
            "gf" => Self::Gf,
            "cf" => Self::Cf,
            "block" => Self::Block,
            "net" => Self::Net,
            other => return Err(Error::Config(format!("unknown gradcheck target {other:?}"))),
        })
    }
}

impl fmt::Display for GradTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Vf => "vf",
            Self::Gf => "gf",
            Self::Cf => "cf",
            Self::Block => "block",
            Self::Net => "net",
        })
    }
}

/// Result for one named tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub max_rel_error: f64,
    pub coords: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradReport {
    pub target: GradTarget,
    pub eps: f64,
    pub groups: Vec<GroupResult>,
}

impl GradReport {
    pub fn worst(&self) -> Option<&GroupResult> {
        self.groups.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |g| g.max_rel_error)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() <= GRAD_TOLERANCE
    }
}

type LossFn = Box<dyn Fn(&mut Session<'_, f64>) -> Result<Var>>;

/// A scalar loss over named tensors, some of which are checked.
struct Problem {
    weights: ModelWeights<f64>,
    loss: LossFn,
    /// Coordinates to probe per tensor; `None` probes all of them.
    coords_per_tensor: Option<usize>,
}

impl Problem {
    fn value(&self, w: &ModelWeights<f64>) -> Result<f64> {
        let mut s = Session::new(w, BnMode::Train);
        let l = (self.loss)(&mut s)?;
        Ok(s.value(l).item())
    }

    fn analytic(&self, fault: Fault) -> Result<BTreeMap<String, Tensor<f64>>> {
        let mut s = Session::new(&self.weights, BnMode::Train);
        s.graph.set_fault(fault);
        let l = (self.loss)(&mut s)?;
        let g = s.graph.backward(l)?;
        let mut out = BTreeMap::new();
        for (name, &v) in s.bound() {
            let grad = match g.get(v) {
                Some(t) => t.clone(),
                None => Tensor::zeros(s.value(v).shape())?,
            };
            out.insert(name.clone(), grad);
        }
        Ok(out)
    }

    fn check(&self, target: GradTarget, eps: f64, seed: u64, fault: Fault) -> Result<GradReport> {
        let eps = positive(eps, "gradcheck step")?;
        let analytic = self.analytic(fault)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let mut groups = Vec::new();
        for (name, grad) in &analytic {
            let theta = self.weights.get(name)?;
            let coords: Vec<usize> = match self.coords_per_tensor {
                Some(k) if k < theta.len() => {
                    let mut c = sample(&mut rng, theta.len(), k).into_vec();
                    c.sort_unstable();
                    c
                }
                _ => (0..theta.len()).collect(),
            };
            let mut worst = 0.0f64;
            for &i in &coords {
                let mut probe = self.weights.clone();
                let mut data = theta.data().to_vec();
                data[i] = theta.data()[i] + eps;
                probe.set(name, Tensor::new(theta.shape(), data.clone())?)?;
                let up = self.value(&probe)?;
                data[i] = theta.data()[i] - eps;
                probe.set(name, Tensor::new(theta.shape(), data)?)?;
                let down = self.value(&probe)?;
                let numeric = (up - down) / (2.0 * eps);
                let err = rel_error(grad.data()[i], numeric, REL_FLOOR);
                if !err.is_finite() {
                    return Err(Error::NonFinite(format!("{name}[{i}]: gradient comparison is not finite")));
                }
                worst = worst.max(err);
            }
            groups.push(GroupResult {
                name: name.clone(),
                max_rel_error: worst,
                coords: coords.len(),
            });
        }
        Ok(GradReport { target, eps, groups })
    }
}

fn randomize(w: &mut ModelWeights<f64>, seed: u64) -> Result<()> {
    let names: Vec<String> = w.iter().map(|(n, _)| n.to_owned()).filter(|n| !is_buffer(n)).collect();
    for (k, name) in names.iter().enumerate() {
        let shape = w.get(name)?.shape().to_vec();
        let mut t = Tensor::random(&shape, seed.wrapping_add(k as u64 * 7919), Init::Uniform(0.5))?;
        if name.ends_with("gamma") {
            t = t.map(|v| 1.0 + 0.4 * v);
        }
        w.set(name, t)?;
    }
    Ok(())
}

fn insert_input(w: &mut ModelWeights<f64>, name: &str, shape: &[usize], seed: u64) -> Result<()> {
    w.insert(name, Tensor::random(shape, seed, Init::Normal(1.0))?)
}

/// `Σ out ⊙ R` for a fixed random `R`, so every output element matters.
fn projected(s: &mut Session<'_, f64>, out: Var, seed: u64) -> Result<Var> {
    let r = Tensor::random(s.value(out).shape(), seed, Init::Normal(1.0))?;
    let r = s.input(r);
    let prod = s.graph.mul(out, r)?;
    Ok(s.graph.sum_all(prod))
}

const CHANNELS: usize = 4;
const SIDE: usize = 8;
const HEADS: usize = 2;
const POOLED: usize = 4;
const BATCH: usize = 2;

fn problem(target: GradTarget, seed: u64) -> Result<Problem> {
    let mut w = ModelWeights::new();
    let map_shape = [BATCH, CHANNELS, SIDE, SIDE];
    let proj_seed = seed.wrapping_add(99);
    let p = match target {
        GradTarget::Vf => {
            VfParams::<f64>::init(CHANNELS, HEADS, POOLED, seed)?.insert_into(&mut w, "vf")?;
            randomize(&mut w, seed)?;
            insert_input(&mut w, "input", &[1, CHANNELS, SIDE, SIDE], seed.wrapping_add(1))?;
            let loss: LossFn = Box::new(move |s| {
                let x = s.param("input")?;
                let out = vf_graph(s, x, "vf", POOLED, VfMode::Factored)?.out;
                projected(s, out, proj_seed)
            });
            Problem { weights: w, loss, coords_per_tensor: None }
        }
        GradTarget::Gf | GradTarget::Cf => {
            BlockParams::<f64>::init(CHANNELS, HEADS, POOLED, seed)?.insert_into(&mut w, "b")?;
            let keep = if target == GradTarget::Gf { "b.gf." } else { "b.cf." };
            let mut sub = ModelWeights::new();
            for (n, t) in w.iter().filter(|(n, _)| n.starts_with(keep)) {
                sub.insert(n, t.clone())?;
            }
            let mut w = sub;
            randomize(&mut w, seed)?;
            for (k, n) in ["x1", "x2", "x3", "x"].iter().enumerate() {
                insert_input(&mut w, n, &map_shape, seed.wrapping_add(1 + k as u64))?;
            }
            let loss: LossFn = if target == GradTarget::Gf {
                Box::new(move |s| {
                    let m = MapVars {
                        x1: s.param("x1")?,
                        x2: s.param("x2")?,
                        x3: s.param("x3")?,
                    };
                    let x = s.param("x")?;
                    let (_, out) = gf_graph(s, m, x, "b")?;
                    projected(s, out, proj_seed)
                })
            } else {
                Box::new(move |s| {
                    let m = MapVars {
                        x1: s.param("x1")?,
                        x2: s.param("x2")?,
                        x3: s.param("x3")?,
                    };
                    let (_, _, out) = cf_graph(s, m, "b")?;
                    projected(s, out, proj_seed)
                })
            };
            Problem { weights: w, loss, coords_per_tensor: None }
        }
        GradTarget::Block => {
            BlockParams::<f64>::init(CHANNELS, HEADS, POOLED, seed)?.insert_into(&mut w, "b")?;
            randomize(&mut w, seed)?;
            insert_input(&mut w, "input", &map_shape, seed.wrapping_add(1))?;
            let loss: LossFn = Box::new(move |s| {
                let x = s.param("input")?;
                let out = block_graph(s, x, "b", POOLED, VfMode::Factored, Pooling::Strict)?;
                projected(s, out, proj_seed)
            });
            Problem { weights: w, loss, coords_per_tensor: None }
        }
        GradTarget::Net => {
            let cfg = tiny_network();
            let mut w = build_network::<f64>(&cfg, seed)?;
            randomize(&mut w, seed)?;
            let x = Tensor::random(&[BATCH, 3, cfg.input_size, cfg.input_size], seed.wrapping_add(1), Init::Normal(1.0))?;
            let y = Tensor::random(&[BATCH, 1, cfg.input_size, cfg.input_size], seed.wrapping_add(2), Init::Uniform(1.0))?
                .map(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let loss: LossFn = Box::new(move |s| {
                let xv = s.input(x.clone());
                let pred = forward_graph(s, &cfg, xv)?;
                combined_loss_graph(s, pred, &y, crate::train::loss::LOSS_WEIGHT)
            });
            Problem {
                weights: w,
                loss,
                coords_per_tensor: Some(NET_COORDS_PER_TENSOR),
            }
        }
    };
    Ok(p)
}

/// The small network used by the end-to-end check: six stages of four
/// channels, two heads, 32×32 input.
pub fn tiny_network() -> NetworkConfig {
    NetworkConfig {
        stage_channels: vec![4; 6],
        heads: HEADS,
        pooled_len: 8,
        input_size: 32,
        ..Default::default()
    }
}

/// Compares tape gradients with central differences of step `eps` on a
/// seeded random instance of `target`. `fault` corrupts a backward rule so
/// that the harness itself can be tested.
pub fn gradcheck(target: GradTarget, eps: f64, seed: u64, fault: Fault) -> Result<GradReport> {
    problem(target, seed)?.check(target, eps, seed, fault)
}
