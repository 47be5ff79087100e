//! AdamW with decoupled weight decay, and the per-epoch cosine schedule.

use std::collections::BTreeMap;

use crate::error::{shape_err, Result};
use crate::params::ModelWeights;
use crate::tensor::{Float, Tensor};

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// `lr_min + ½(lr_max − lr_min)(1 + cos(π·min(t, T)/T))`.
pub fn cosine_lr(epoch: usize, lr_max: f64, lr_min: f64, period: usize) -> f64 {
    if period == 0 {
        return lr_min;
    }
    let t = epoch.min(period) as f64 / period as f64;
    if t == 1.0 {
        // cos(π) rounds to exactly −1, but keep the endpoint exact regardless
        return lr_min;
    }
    lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Moment estimates per parameter name.
#[derive(Debug, Clone)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    first: BTreeMap<String, Tensor<T>>,
    second: BTreeMap<String, Tensor<T>>,
}

impl<T: Float> Default for AdamW<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> AdamW<T> {
    pub fn new() -> Self {
        Self {
            beta1: BETA1,
            beta2: BETA2,
            eps: ADAM_EPS,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn first_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.first.get(name)
    }

    pub fn second_moment(&self, name: &str) -> Option<&Tensor<T>> {
        self.second.get(name)
    }

    /// One update of every trainable tensor in `weights`. Parameters absent
    /// from `grads` are treated as having zero gradient.
    pub fn step(
        &mut self,
        weights: &mut ModelWeights<T>,
        grads: &BTreeMap<String, Tensor<T>>,
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let names: Vec<String> = weights.trainable().map(|(n, _)| n.to_owned()).collect();
        for name in names {
            let theta = weights.get(&name)?;
            let shape = theta.shape().to_vec();
            let zero = Tensor::zeros(&shape)?;
            let g = grads.get(&name).unwrap_or(&zero);
            if g.shape() != shape.as_slice() {
                return Err(shape_err!("{name}: gradient {:?} vs parameter {shape:?}", g.shape()));
            }
            let m = self.first.entry(name.clone()).or_insert_with(|| zero.clone());
            let v = self.second.entry(name.clone()).or_insert_with(|| zero.clone());
            let mut m_new = Vec::with_capacity(theta.len());
            let mut v_new = Vec::with_capacity(theta.len());
            let mut t_new = Vec::with_capacity(theta.len());
            for i in 0..theta.len() {
                let gi = g.data()[i].f64();
                let mi = b1 * m.data()[i].f64() + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i].f64() + (1.0 - b2) * gi * gi;
                let th = theta.data()[i].f64();
                let update = (mi / c1) / ((vi / c2).sqrt() + self.eps);
                t_new.push(T::of(th - lr * update - lr * weight_decay * th));
                m_new.push(T::of(mi));
                v_new.push(T::of(vi));
            }
            *m = Tensor::new(&shape, m_new)?;
            *v = Tensor::new(&shape, v_new)?;
            weights.set(&name, Tensor::new(&shape, t_new)?)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(theta: f64) -> ModelWeights<f64> {
        let mut w = ModelWeights::new();
        w.insert("p", Tensor::scalar(theta)).unwrap();
        w
    }

    fn grad(g: f64) -> BTreeMap<String, Tensor<f64>> {
        BTreeMap::from([("p".to_string(), Tensor::scalar(g))])
    }

    #[test]
    fn schedule_endpoints() {
        assert_eq!(cosine_lr(0, 1e-4, 1e-5, 50), 1e-4);
        assert_eq!(cosine_lr(50, 1e-4, 1e-5, 50), 1e-5);
        assert_eq!(cosine_lr(80, 1e-4, 1e-5, 50), 1e-5);
        assert!((cosine_lr(25, 1e-4, 1e-5, 50) - 5.5e-5).abs() < 1e-18);
        for t in 0..50 {
            assert!(cosine_lr(t + 1, 1e-4, 1e-5, 50) <= cosine_lr(t, 1e-4, 1e-5, 50));
        }
    }

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut w = single(0.37);
        let mut opt = AdamW::new();
        opt.step(&mut w, &grad(0.0), 1e-3, 0.0).unwrap();
        assert_eq!(w.get("p").unwrap().item(), 0.37);
    }

    #[test]
    fn first_step_worked_example() {
        let mut w = single(1.0);
        let mut opt = AdamW::new();
        opt.step(&mut w, &grad(1.0), 1e-4, 1e-2).unwrap();
        // m̂ = v̂ = 1, so the step is lr/(1 + ε) plus the decay lr·wd
        let want = 1.0 - 1e-4 / (1.0 + 1e-8) - 1e-6;
        assert!((w.get("p").unwrap().item() - want).abs() < 1e-15);
        assert!((w.get("p").unwrap().item() - 0.999_899).abs() < 1e-9);
    }

    #[test]
    fn decay_alone_shrinks_by_lr_wd_theta() {
        let mut w = single(2.0);
        let mut opt = AdamW::new();
        opt.step(&mut w, &grad(0.0), 1e-2, 0.5).unwrap();
        assert_eq!(w.get("p").unwrap().item(), 2.0 - 1e-2 * 0.5 * 2.0);
    }
}
