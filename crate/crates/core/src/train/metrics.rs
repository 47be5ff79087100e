//! Confusion counts and the five segmentation metrics derived from them.

use std::ops::AddAssign;

use crate::error::{shape_err, Result};
use crate::tensor::{Float, Tensor};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Metrics as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricsReport {
    pub miou: f64,
    pub dsc: f64,
    pub acc: f64,
    pub sen: f64,
    pub spe: f64,
}

impl MetricsReport {
    /// Names and values in the conventional reporting order.
    pub fn named(&self) -> [(&'static str, f64); 5] {
        [
            ("mIoU", self.miou),
            ("DSC", self.dsc),
            ("Acc", self.acc),
            ("Sen", self.sen),
            ("Spe", self.spe),
        ]
    }
}

/// Pixel `p` is predicted foreground when `pred[p] > threshold`; the target
/// is foreground when `target[p] >= 0.5`.
pub fn confusion_counts<T: Float>(pred: &Tensor<T>, target: &Tensor<T>, threshold: f64) -> Result<ConfusionCounts> {
    if pred.shape() != target.shape() {
        return Err(shape_err!(
            "prediction {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(target.data()) {
        match (p.f64() > threshold, g.f64() >= 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// `num / den`, or 1 when the denominator is zero (nothing to get wrong).
fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> MetricsReport {
    MetricsReport {
        miou: ratio(c.tp, c.tp + c.fp + c.fn_),
        dsc: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        acc: ratio(c.tp + c.tn, c.total()),
        sen: ratio(c.tp, c.tp + c.fn_),
        spe: ratio(c.tn, c.tn + c.fp),
    }
}
