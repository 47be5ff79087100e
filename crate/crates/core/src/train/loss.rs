//! Segmentation losses: soft Dice, binary cross-entropy, and their weighted
//! combination used as the training objective.
//!
//! Sums are accumulated in `f64` regardless of the tensor precision.

use crate::error::{contract, shape_err, Result};
use crate::tensor::{Float, Tensor};

/// Additive smoothing in the Dice ratio; keeps empty masks well defined.
pub const DICE_SMOOTH: f64 = 1.0;
/// Predictions are clamped to `[CE_CLAMP, 1 - CE_CLAMP]` inside the log.
pub const CE_CLAMP: f64 = 1e-7;
/// Weight of the Dice term; cross-entropy gets `1 - LOSS_WEIGHT`.
pub const LOSS_WEIGHT: f64 = 0.6;

fn same_shape<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(shape_err!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    Ok(())
}

struct DiceSums {
    inter: f64,
    total: f64,
}

fn dice_sums<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> DiceSums {
    let (mut inter, mut total) = (0.0, 0.0);
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        let (p, g) = (p.f64(), g.f64());
        inter += p * g;
        total += p + g;
    }
    DiceSums { inter, total }
}

pub(crate) fn dice_value<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<T> {
    same_shape(pred, target)?;
    let s = dice_sums(pred, target);
    Ok(T::of(1.0 - (2.0 * s.inter + smooth) / (s.total + smooth)))
}

pub(crate) fn dice_grad<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<Tensor<T>> {
    same_shape(pred, target)?;
    let s = dice_sums(pred, target);
    let num = 2.0 * s.inter + smooth;
    let den = s.total + smooth;
    let d: Vec<T> = target
        .data()
        .iter()
        .map(|&g| T::of(-(2.0 * g.f64() * den - num) / (den * den)))
        .collect();
    Tensor::new(pred.shape(), d)
}

pub(crate) fn bce_value<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, clamp: f64) -> Result<T> {
    same_shape(pred, target)?;
    let lo = clamp;
    let hi = 1.0 - clamp;
    let mut acc = 0.0;
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        let p = p.f64().clamp(lo, hi);
        let g = g.f64();
        acc -= g * p.ln() + (1.0 - g) * (1.0 - p).ln();
    }
    Ok(T::of(acc / pred.len() as f64))
}

pub(crate) fn bce_grad<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, clamp: f64) -> Result<Tensor<T>> {
    same_shape(pred, target)?;
    let n = pred.len() as f64;
    let d: Vec<T> = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &g)| {
            let (p, g) = (p.f64(), g.f64());
            if p < clamp || p > 1.0 - clamp {
                T::zero()
            } else {
                T::of((-g / p + (1.0 - g) / (1.0 - p)) / n)
            }
        })
        .collect();
    Tensor::new(pred.shape(), d)
}

/// `1 − (2·Σpg + 1)/(Σp + Σg + 1)`.
pub fn dice_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    Ok(dice_value(pred, target, DICE_SMOOTH)?.f64())
}

/// Mean binary cross-entropy with clamped predictions.
pub fn ce_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<f64> {
    Ok(bce_value(pred, target, CE_CLAMP)?.f64())
}

/// `ω·dice + (1 − ω)·ce`.
pub fn combine(dice: f64, ce: f64, omega: f64) -> f64 {
    omega * dice + (1.0 - omega) * ce
}

pub fn combined_loss<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, omega: f64) -> Result<f64> {
    contract!((0.0..=1.0).contains(&omega), "loss weight must lie in [0, 1], got {omega}");
    Ok(combine(dice_loss(pred, target)?, ce_loss(pred, target)?, omega))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn half_mask(n: usize, offset: usize) -> Tensor<f64> {
        // foreground on n/2 consecutive pixels starting at `offset`
        let v: Vec<f64> = (0..n)
            .map(|i| if (i + n - offset) % n < n / 2 { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(&[n], v).unwrap()
    }

    #[test]
    fn dice_examples() {
        let g = half_mask(2000, 0);
        assert!(dice_loss(&g, &g).unwrap() <= 1e-3);
        let inv = g.map(|v| 1.0 - v);
        assert!(dice_loss(&inv, &g).unwrap() >= 0.99);
        // two 1000-pixel masks overlapping on 500 pixels
        let shifted = half_mask(2000, 500);
        let d = dice_loss(&shifted, &g).unwrap();
        assert!((d - 0.5).abs() < 1e-3, "{d}");
        let bad = Tensor::<f64>::zeros(&[3]).unwrap();
        assert!(dice_loss(&bad, &g).is_err());
    }

    #[test]
    fn ce_examples() {
        let g = half_mask(100, 0);
        let half = Tensor::full(&[100], 0.5).unwrap();
        assert!((ce_loss(&half, &g).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(ce_loss(&g, &g).unwrap() <= 1.2e-6);
        let g32 = g.cast::<f32>();
        assert!(ce_loss(&g32, &g32).unwrap() <= 1.2e-6);
        let ones = Tensor::ones(&[10]).unwrap();
        let p = Tensor::full(&[10], 0.9).unwrap();
        assert!((ce_loss(&p, &ones).unwrap() - 0.105_360_515_657_826_3).abs() < 1e-12);
    }

    #[test]
    fn combined_examples() {
        let g = half_mask(64, 3);
        let p = Tensor::<f64>::random(&[64], 1, crate::tensor::Init::Uniform(0.5))
            .unwrap()
            .map(|v| v + 0.5);
        let (d, c) = (dice_loss(&p, &g).unwrap(), ce_loss(&p, &g).unwrap());
        assert_eq!(combined_loss(&p, &g, 1.0).unwrap(), d);
        assert_eq!(combined_loss(&p, &g, 0.0).unwrap(), c);
        assert!((combine(0.5, std::f64::consts::LN_2, LOSS_WEIGHT) - 0.577_258_872).abs() < 1e-9);
        assert!(combined_loss(&p, &g, 1.5).is_err());
    }
}
