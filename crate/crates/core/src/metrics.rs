//! Confusion counting and the derived precision, recall, IoU and F1.

use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ClassMap, Real, Tensor};

/// Binary confusion counts. Merging is plain addition, so shards can be
/// combined in any order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }

    /// Adds one pixel.
    #[inline]
    pub fn record(&mut self, pred: bool, target: bool) {
        match (pred, target) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
    }

    /// Adds every pixel of two 0/1 masks.
    pub fn accumulate<T: Real>(&mut self, pred: &Tensor<T>, target: &Tensor<T>) -> Result<()> {
        if pred.shape() != target.shape() {
            return Err(Error::ShapeMismatch {
                what: "confusion counts",
                left: pred.shape(),
                right: target.shape(),
            });
        }
        let bit = |v: T| {
            if v == T::one() {
                Ok(true)
            } else if v == T::zero() {
                Ok(false)
            } else {
                Err(Error::InvalidInput(alloc::format!(
                    "masks must be binary, found value {v}"
                )))
            }
        };
        let mut local = Self::default();
        for (&p, &t) in pred.data().iter().zip(target.data()) {
            local.record(bit(p)?, bit(t)?);
        }
        *self += local;
        Ok(())
    }

    pub fn report(&self) -> MetricsReport {
        compute_metrics(self)
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            fn_: self.fn_ + o.fn_,
            tn: self.tn + o.tn,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

/// Counts of two masks in one call.
pub fn accumulate<T: Real>(
    pred: &Tensor<T>,
    target: &Tensor<T>,
    counts: ConfusionCounts,
) -> Result<ConfusionCounts> {
    let mut c = counts;
    c.accumulate(pred, target)?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub precision: f64,
    pub recall: f64,
    pub iou: f64,
    pub f1: f64,
    /// Set when no pixel was counted.
    pub empty: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub per_class_iou: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Precision, recall, IoU and F1; a zero denominator yields 0.
pub fn compute_metrics(c: &ConfusionCounts) -> MetricsReport {
    let precision = ratio(c.tp, c.tp + c.fp);
    let recall = ratio(c.tp, c.tp + c.fn_);
    let iou = ratio(c.tp, c.tp + c.fp + c.fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    };
    MetricsReport {
        precision,
        recall,
        iou,
        f1,
        empty: c.total() == 0,
        per_class_iou: None,
        miou: None,
    }
}

/// F1 from precision and recall alone.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// `k × k` confusion matrix, rows indexed by target class and columns by
/// predicted class.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultiConfusion {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl MultiConfusion {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, target: usize, pred: usize) -> u64 {
        self.counts[target * self.classes + pred]
    }

    /// Adds every labelled pixel; pixels whose target is
    /// [`ClassMap::IGNORE`] are skipped.
    pub fn accumulate(&mut self, pred: &ClassMap, target: &ClassMap) -> Result<()> {
        if pred.shape != target.shape {
            return Err(Error::InvalidInput(alloc::format!(
                "class maps differ in shape: {:?} vs {:?}",
                pred.shape,
                target.shape
            )));
        }
        let k = self.classes;
        for (&p, &t) in pred.data.iter().zip(&target.data) {
            if t == ClassMap::IGNORE {
                continue;
            }
            let (p, t) = (p as usize, t as usize);
            if p >= k || t >= k {
                return Err(Error::InvalidInput(alloc::format!(
                    "class index out of range for {k} classes"
                )));
            }
            self.counts[t * k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        assert_eq!(self.classes, other.classes, "class counts differ");
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// IoU per class; `None` for classes absent from both target and
    /// prediction.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let row: u64 = (0..k).map(|p| self.get(c, p)).sum();
                let col: u64 = (0..k).map(|t| self.get(t, c)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    pub fn report(&self) -> MetricsReport {
        let ious = self.per_class_iou();
        MetricsReport {
            per_class_iou: Some(ious.iter().map(|v| v.unwrap_or(0.0)).collect()),
            miou: Some(compute_miou(self)),
            empty: self.counts.iter().all(|&c| c == 0),
            ..MetricsReport::default()
        }
    }
}

/// Mean IoU over the classes present in target or prediction.
pub fn compute_miou(m: &MultiConfusion) -> f64 {
    let present: Vec<f64> = m.per_class_iou().into_iter().flatten().collect();
    if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    }
}

/// The two-class (unchanged/changed) view of binary counts.
pub fn binary_as_multi(c: &ConfusionCounts) -> MultiConfusion {
    MultiConfusion {
        classes: 2,
        counts: vec![c.tn, c.fp, c.fn_, c.tp],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn accumulate_closed_forms() {
        let ones = Tensor::<f32>::ones([1, 1, 4, 4]);
        assert_eq!(accumulate(&ones, &ones, ConfusionCounts::default()).unwrap().tp, 16);
        let o = Tensor::<f32>::ones([1, 1, 2, 2]);
        let z = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert_eq!(accumulate(&o, &z, ConfusionCounts::default()).unwrap(), counts(0, 4, 0, 0));
    }

    #[test]
    fn non_binary_or_mismatched_masks_are_rejected() {
        let a = Tensor::<f32>::full([1, 1, 2, 2], 0.5);
        let b = Tensor::<f32>::zeros([1, 1, 2, 2]);
        assert!(accumulate(&a, &b, ConfusionCounts::default()).is_err());
        assert!(accumulate(&b, &Tensor::zeros([1, 1, 2, 3]), ConfusionCounts::default()).is_err());
    }

    #[test]
    fn metric_closed_forms() {
        let r = compute_metrics(&counts(1, 0, 0, 0));
        assert_eq!((r.iou, r.f1), (1.0, 1.0));
        let r = compute_metrics(&counts(50, 25, 25, 0));
        assert!((r.precision - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.recall - 2.0 / 3.0).abs() < 1e-12);
        assert!((r.iou - 0.5).abs() < 1e-12);
        assert!((r.f1 - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn zero_denominators_give_zero_and_empty_is_flagged() {
        let r = compute_metrics(&ConfusionCounts::default());
        assert!(r.empty);
        assert_eq!((r.precision, r.recall, r.iou, r.f1), (0.0, 0.0, 0.0, 0.0));
        let r = compute_metrics(&counts(0, 0, 0, 10));
        assert!(!r.empty && r.f1 == 0.0);
    }

    #[test]
    fn published_precision_and_recall_give_published_f1() {
        assert!((f1_score(0.9307, 0.9152) - 0.9229).abs() < 5e-4);
    }

    #[test]
    fn miou_closed_forms() {
        let a = ClassMap::new([1, 2, 2], vec![0, 1, 1, 0]).unwrap();
        let mut m = MultiConfusion::new(2);
        m.accumulate(&a, &a).unwrap();
        assert_eq!(compute_miou(&m), 1.0);

        let target = ClassMap::new([1, 2, 2], vec![0, 0, 1, 1]).unwrap();
        let pred = ClassMap::new([1, 2, 2], vec![0, 0, 0, 0]).unwrap();
        let mut m = MultiConfusion::new(2);
        m.accumulate(&pred, &target).unwrap();
        // Class 0: IoU 2/4; class 1 never predicted: IoU 0.
        assert!((compute_miou(&m) - 0.25).abs() < 1e-12);

        // Class 0 perfect, class 1 entirely missed (predicted as class 2,
        // which has no target pixels): IoUs {1, 0, 0}.
        let target = ClassMap::new([1, 1, 4], vec![0, 0, 1, 1]).unwrap();
        let pred = ClassMap::new([1, 1, 4], vec![0, 0, 2, 2]).unwrap();
        let mut m = MultiConfusion::new(3);
        m.accumulate(&pred, &target).unwrap();
        assert_eq!(m.per_class_iou(), vec![Some(1.0), Some(0.0), Some(0.0)]);
        assert_eq!(m.get(1, 2), 2);
        // A class absent from target and prediction is left out of the mean.
        let mut m = MultiConfusion::new(3);
        m.accumulate(&target.clone(), &target).unwrap();
        let mut missed = MultiConfusion::new(3);
        missed.accumulate(&ClassMap::new([1, 1, 2], vec![0, 0]).unwrap(), &ClassMap::new([1, 1, 2], vec![0, 1]).unwrap()).unwrap();
        assert_eq!(m.per_class_iou()[2], None);
        assert!((compute_miou(&missed) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn merging_is_order_independent() {
        let a = counts(1, 2, 3, 4);
        let b = counts(5, 6, 7, 8);
        assert_eq!(a + b, b + a);
        let mut c = a;
        c += b;
        assert_eq!(c.total(), 36);
    }
}
