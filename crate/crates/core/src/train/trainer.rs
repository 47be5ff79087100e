//! Mini-batch training and split evaluation.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{contract, Error, Result};
use crate::network::{forward, forward_graph, NetworkConfig};
use crate::nn::BnMode;
use crate::params::{apply_bn_updates, ModelWeights, Session};
use crate::tensor::{Float, Tensor};

use super::augment::{augment, AugmentConfig};
use super::data::Sample;
use super::loss::{CE_CLAMP, DICE_SMOOTH, LOSS_WEIGHT};
use super::metrics::{compute_metrics, confusion_counts, ConfusionCounts, MetricsReport};
use super::optim::{cosine_lr, AdamW};

/// Probability above which a pixel is predicted foreground.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    /// Cosine period in epochs; the rate stays at `lr_min` afterwards.
    pub period: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub loss_weight: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_max: 1e-4,
            lr_min: 1e-5,
            weight_decay: 1e-2,
            period: 50,
            batch_size: 8,
            epochs: 240,
            loss_weight: LOSS_WEIGHT,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.loss_weight) {
            return bad(format!("loss_weight must lie in [0, 1], got {}", self.loss_weight));
        }
        if !(self.lr_min >= 0.0 && self.lr_min <= self.lr_max) {
            return bad(format!("need 0 <= lr_min <= lr_max, got {} and {}", self.lr_min, self.lr_max));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        if self.weight_decay < 0.0 {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        Ok(())
    }

    pub fn lr(&self, epoch: usize) -> f64 {
        cosine_lr(epoch, self.lr_max, self.lr_min, self.period)
    }
}

/// One row of the metric log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: MetricsReport,
}

pub const METRICS_HEADER: &str = "epoch,lr,train_loss,val_miou,val_dsc,val_acc,val_sen,val_spe";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let v = &self.val;
        format!(
            "{},{:e},{},{},{},{},{},{}",
            self.epoch, self.lr, self.train_loss, v.miou, v.dsc, v.acc, v.sen, v.spe
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Weights of the epoch with the highest validation mIoU (earliest on ties).
    pub best: ModelWeights<T>,
    pub best_epoch: usize,
    pub last: ModelWeights<T>,
    pub log: Vec<EpochLog>,
    pub steps: usize,
}

fn stack<T: Float>(items: &[&Tensor<T>]) -> Result<Tensor<T>> {
    Tensor::stack(items)
}

/// Batch boundaries for `n` items. A trailing batch of one is merged into
/// the previous batch, since training-mode batch norm over the `1×1` channel
/// descriptors needs at least two samples.
pub fn batch_ranges(n: usize, batch: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n).step_by(batch.max(1)).map(|s| s..(s + batch).min(n)).collect();
    if out.len() >= 2 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("checked length");
        out.last_mut().expect("checked length").end = last.end;
    }
    out
}

/// Forward, loss, backward and one AdamW update on a batch. Returns the loss.
#[allow(clippy::too_many_arguments)]
pub fn train_step<T: Float>(
    weights: &mut ModelWeights<T>,
    opt: &mut AdamW<T>,
    net: &NetworkConfig,
    images: &Tensor<T>,
    masks: &Tensor<T>,
    lr: f64,
    weight_decay: f64,
    loss_weight: f64,
) -> Result<f64> {
    let (loss, grads, updates) = {
        let mut s = Session::new(weights, BnMode::Train);
        let x = s.input(images.clone());
        let pred = forward_graph(&mut s, net, x)?;
        let loss = combined_loss_graph(&mut s, pred, masks, loss_weight)?;
        let value = s.value(loss).item().f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss is {value}")));
        }
        let g = s.graph.backward(loss)?;
        let grads: BTreeMap<String, Tensor<T>> = s
            .bound()
            .iter()
            .filter_map(|(name, &v)| g.get(v).map(|t| (name.clone(), t.clone())))
            .collect();
        (value, grads, s.bn_updates().to_vec())
    };
    opt.step(weights, &grads, lr, weight_decay)?;
    apply_bn_updates(weights, &updates)?;
    Ok(loss)
}

/// `ω·dice + (1 − ω)·bce` recorded on the tape.
pub fn combined_loss_graph<T: Float>(
    s: &mut Session<'_, T>,
    pred: crate::autograd::Var,
    target: &Tensor<T>,
    loss_weight: f64,
) -> Result<crate::autograd::Var> {
    let g = &mut s.graph;
    let dice = g.dice(pred, target, DICE_SMOOTH)?;
    let ce = g.bce(pred, target, CE_CLAMP)?;
    let a = g.affine(dice, loss_weight, 0.0);
    let b = g.affine(ce, 1.0 - loss_weight, 0.0);
    g.add(a, b)
}

/// Trains from `init`. Each epoch shuffles (seeded), augments, and steps
/// through mini-batches at `cosine_lr(epoch)`, then scores the validation
/// split; when `val` is empty the training split is scored instead.
/// `on_epoch` sees every log row and the current weights.
pub fn train_loop<T: Float>(
    net: &NetworkConfig,
    cfg: &TrainConfig,
    init: ModelWeights<T>,
    train: &[Sample<T>],
    val: &[Sample<T>],
    mut on_epoch: impl FnMut(&EpochLog, &ModelWeights<T>) -> Result<()>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    net.validate()?;
    contract!(!train.is_empty(), "training split is empty");
    contract!(
        train.len() >= 2,
        "training needs at least 2 samples for batch statistics, got {}",
        train.len()
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut weights = init;
    let mut opt = AdamW::new();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, usize, ModelWeights<T>)> = None;
    let mut steps = 0;
    let score_set = if val.is_empty() { train } else { val };
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let ranges = batch_ranges(order.len(), cfg.batch_size);
        for (b, range) in ranges.iter().enumerate() {
            let mut imgs = Vec::with_capacity(range.len());
            let mut masks = Vec::with_capacity(range.len());
            for &i in &order[range.clone()] {
                let (im, m) = augment(&train[i].image, &train[i].mask, &mut rng, cfg.augment)?;
                imgs.push(im);
                masks.push(m);
            }
            let x = stack(&imgs.iter().collect::<Vec<_>>())?;
            let y = stack(&masks.iter().collect::<Vec<_>>())?;
            let loss = train_step(&mut weights, &mut opt, net, &x, &y, lr, cfg.weight_decay, cfg.loss_weight)
                .map_err(|e| match e {
                    Error::NonFinite(m) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {m}")),
                    other => other,
                })?;
            total += loss;
            steps += 1;
        }
        let entry = EpochLog {
            epoch,
            lr,
            train_loss: total / ranges.len() as f64,
            val: evaluate(&weights, net, score_set)?,
        };
        on_epoch(&entry, &weights)?;
        if best.as_ref().is_none_or(|(m, _, _)| entry.val.miou > *m) {
            best = Some((entry.val.miou, epoch, weights.clone()));
        }
        log.push(entry);
    }
    let (best_epoch, best) = match best {
        Some((_, e, w)) => (e, w),
        None => (0, weights.clone()),
    };
    Ok(TrainOutcome {
        best,
        best_epoch,
        last: weights,
        log,
        steps,
    })
}

/// Confusion counts of every pixel of `samples` (evaluation-mode forward).
pub fn split_counts<T: Float>(weights: &ModelWeights<T>, net: &NetworkConfig, samples: &[Sample<T>]) -> Result<ConfusionCounts> {
    contract!(!samples.is_empty(), "cannot evaluate an empty split");
    let per: Vec<Result<ConfusionCounts>> = samples
        .par_iter()
        .map(|s| {
            let x = s.image.reshape(&[1, s.image.shape()[0], s.image.shape()[1], s.image.shape()[2]])?;
            let p = forward(weights, net, &x)?;
            let target = s.mask.reshape(p.shape())?;
            confusion_counts(&p, &target, THRESHOLD)
        })
        .collect();
    let mut total = ConfusionCounts::default();
    for c in per {
        total += c?;
    }
    Ok(total)
}

/// Micro-averaged metrics: counts pooled over the split, then the formulas
/// applied once.
pub fn evaluate<T: Float>(weights: &ModelWeights<T>, net: &NetworkConfig, samples: &[Sample<T>]) -> Result<MetricsReport> {
    Ok(compute_metrics(&split_counts(weights, net, samples)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::build_network;
    use crate::train::data::synthetic_ellipses;

    fn tiny() -> NetworkConfig {
        NetworkConfig {
            stage_channels: vec![4; 6],
            heads: 2,
            pooled_len: 8,
            input_size: 32,
            ..Default::default()
        }
    }

    #[test]
    fn batches_never_end_with_a_single_sample() {
        assert_eq!(batch_ranges(8, 3), vec![0..3, 3..6, 6..8]);
        assert_eq!(batch_ranges(7, 3), vec![0..3, 3..7]);
        assert_eq!(batch_ranges(2, 8), vec![0..2]);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { loss_weight: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_min: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..Default::default() }.validate().is_err());
        assert_eq!(TrainConfig::default().lr(0), 1e-4);
    }

    #[test]
    fn short_run_is_deterministic_and_logs_lr() {
        let net = tiny();
        let data = synthetic_ellipses::<f32>(4, 32, 1).unwrap();
        let cfg = TrainConfig { epochs: 2, batch_size: 2, ..Default::default() };
        let run = || {
            let w = build_network::<f32>(&net, 3).unwrap();
            train_loop(&net, &cfg, w, &data, &[], |_, _| Ok(())).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.last, b.last);
        assert_eq!(a.log, b.log);
        assert_eq!(a.log[0].lr, 1e-4);
        assert_eq!(a.steps, 4);
        assert!(a.log.iter().all(|l| l.train_loss.is_finite()));
    }

    #[test]
    fn evaluation_is_pure() {
        let net = tiny();
        let w = build_network::<f32>(&net, 0).unwrap();
        let data = synthetic_ellipses::<f32>(2, 32, 2).unwrap();
        assert_eq!(evaluate(&w, &net, &data).unwrap(), evaluate(&w, &net, &data).unwrap());
        assert!(evaluate(&w, &net, &[]).is_err());
    }
}
