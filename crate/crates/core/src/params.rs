//! Named parameter storage and the per-forward [`Session`] that binds stored
//! tensors onto a [`Graph`].

use std::collections::BTreeMap;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{self, BnMode, BN_EPS};
use crate::tensor::{Float, Tensor};

const BUFFER_SUFFIXES: [&str; 2] = [".running_mean", ".running_var"];

/// `true` for non-trainable state (batch-norm running statistics).
pub fn is_buffer(name: &str) -> bool {
    BUFFER_SUFFIXES.iter().any(|s| name.ends_with(s))
}

/// Ordered map from dot-separated parameter path to tensor. Iteration order
/// is lexicographic by name.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Default for ModelWeights<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ModelWeights<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    /// Adds a tensor; a name may only be inserted once.
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name {name}")));
        }
        self.tensors.insert(name, t);
        Ok(())
    }

    /// Replaces an existing tensor with one of the same shape.
    pub fn set(&mut self, name: &str, t: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if slot.shape() != t.shape() {
            return Err(Error::ShapeMismatch(format!(
                "{name}: stored {:?}, new {:?}",
                slot.shape(),
                t.shape()
            )));
        }
        *slot = t;
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<T>> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter {name}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Trainable tensors only.
    pub fn trainable(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.iter().filter(|(k, _)| !is_buffer(k))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total element count of trainable tensors.
    pub fn count_params(&self) -> usize {
        self.trainable().map(|(_, t)| t.len()).sum()
    }

    /// Trainable element count under a name prefix such as `enc.4.`.
    pub fn count_params_with_prefix(&self, prefix: &str) -> usize {
        self.trainable()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, t)| t.len())
            .sum()
    }

    pub fn cast<U: Float>(&self) -> ModelWeights<U> {
        ModelWeights {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Copies every tensor of `other` under `prefix.`.
    pub fn extend_prefixed(&mut self, prefix: &str, other: ModelWeights<T>) -> Result<()> {
        for (k, v) in other.tensors {
            self.insert(format!("{prefix}.{k}"), v)?;
        }
        Ok(())
    }
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BnUpdate<T> {
    pub prefix: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
    pub count: usize,
}

/// One forward pass: a fresh tape plus the parameters bound onto it.
///
/// Each stored parameter becomes at most one graph node, however many times
/// the forward code asks for it.
pub struct Session<'w, T> {
    pub graph: Graph<T>,
    weights: &'w ModelWeights<T>,
    bound: BTreeMap<String, Var>,
    pub mode: BnMode,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<'w, T: Float> Session<'w, T> {
    pub fn new(weights: &'w ModelWeights<T>, mode: BnMode) -> Self {
        Self {
            graph: Graph::new(),
            weights,
            bound: BTreeMap::new(),
            mode,
            bn_updates: Vec::new(),
        }
    }

    pub fn weights(&self) -> &ModelWeights<T> {
        self.weights
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let v = self.graph.param(self.weights.get(name)?.clone());
        self.bound.insert(name.to_owned(), v);
        Ok(v)
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.input(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Parameters bound so far, by name.
    pub fn bound(&self) -> &BTreeMap<String, Var> {
        &self.bound
    }

    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    /// "Same" convolution using `{prefix}.weight` and `{prefix}.bias`.
    pub fn conv(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let w = self.param(&format!("{prefix}.weight"))?;
        let b = self.param(&format!("{prefix}.bias"))?;
        let k = self.graph.shape(w)[2];
        self.graph.conv2d(x, w, Some(b), 1, (k - 1) / 2)
    }

    /// Batch norm using `{prefix}.gamma/.beta` and, in evaluation mode,
    /// `{prefix}.running_mean/.running_var`.
    pub fn batchnorm(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let gamma = self.param(&format!("{prefix}.gamma"))?;
        let beta = self.param(&format!("{prefix}.beta"))?;
        match self.mode {
            BnMode::Train => {
                let (mean, var) = nn::bn_batch_stats(self.graph.value(x))?;
                let y = self.graph.batchnorm(x, gamma, beta, (&mean, &var), BN_EPS, true)?;
                let count = self.graph.value(x).len() / mean.len();
                self.bn_updates.push(BnUpdate {
                    prefix: prefix.to_owned(),
                    mean,
                    var,
                    count,
                });
                Ok(y)
            }
            BnMode::Eval => {
                let mean = self.weights.get(&format!("{prefix}.running_mean")).map_err(|_| {
                    Error::Contract(format!("{prefix}: evaluation-mode batch norm without running statistics"))
                })?;
                let var = self.weights.get(&format!("{prefix}.running_var"))?;
                let (m, v) = (mean.data().to_vec(), var.data().to_vec());
                self.graph.batchnorm(x, gamma, beta, (&m, &v), BN_EPS, false)
            }
        }
    }
}

/// Writes `{prefix}.weight/.bias` for a convolution.
pub(crate) fn insert_conv<T: Float>(w: &mut ModelWeights<T>, prefix: &str, p: nn::ConvParams<T>) -> Result<()> {
    w.insert(format!("{prefix}.weight"), p.weight)?;
    w.insert(format!("{prefix}.bias"), p.bias)
}

pub(crate) fn read_conv<T: Float>(w: &ModelWeights<T>, prefix: &str) -> Result<nn::ConvParams<T>> {
    let weight = w.get(&format!("{prefix}.weight"))?.clone();
    let k = weight.shape()[2];
    Ok(nn::ConvParams {
        weight,
        bias: w.get(&format!("{prefix}.bias"))?.clone(),
        stride: 1,
        padding: (k - 1) / 2,
    })
}

pub(crate) fn insert_bn<T: Float>(w: &mut ModelWeights<T>, prefix: &str, bn: nn::BnState<T>) -> Result<()> {
    w.insert(format!("{prefix}.gamma"), bn.gamma)?;
    w.insert(format!("{prefix}.beta"), bn.beta)?;
    if let Some(m) = bn.running_mean {
        w.insert(format!("{prefix}.running_mean"), m)?;
    }
    if let Some(v) = bn.running_var {
        w.insert(format!("{prefix}.running_var"), v)?;
    }
    Ok(())
}

pub(crate) fn read_bn<T: Float>(w: &ModelWeights<T>, prefix: &str) -> Result<nn::BnState<T>> {
    let opt = |s: &str| w.get(&format!("{prefix}.{s}")).ok().cloned();
    Ok(nn::BnState {
        gamma: w.get(&format!("{prefix}.gamma"))?.clone(),
        beta: w.get(&format!("{prefix}.beta"))?.clone(),
        running_mean: opt("running_mean"),
        running_var: opt("running_var"),
        momentum: nn::BN_MOMENTUM,
        eps: BN_EPS,
        mode: BnMode::Eval,
    })
}

/// Folds recorded batch statistics into the stored running statistics.
pub fn apply_bn_updates<T: Float>(w: &mut ModelWeights<T>, updates: &[BnUpdate<T>]) -> Result<()> {
    for u in updates {
        let mut state = read_bn(w, &u.prefix)?;
        nn::update_running_stats(&mut state, &u.mean, &u.var, u.count)?;
        let (m, v) = (state.running_mean.expect("set by update"), state.running_var.expect("set by update"));
        let mname = format!("{}.running_mean", u.prefix);
        let vname = format!("{}.running_var", u.prefix);
        if w.contains(&mname) {
            w.set(&mname, m)?;
            w.set(&vname, v)?;
        } else {
            w.insert(mname, m)?;
            w.insert(vname, v)?;
        }
    }
    Ok(())
}
