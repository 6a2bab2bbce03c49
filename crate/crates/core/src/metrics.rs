//! Pixel-level confusion counts and the five reported ratios.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
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

    /// Counts from flat probability and target slices; a pixel is predicted
    /// crack when its probability is strictly above `threshold`.
    pub fn from_slices<P, T>(pred: &[P], target: &[T], threshold: f64) -> Result<Self>
    where
        P: Copy + Into<f64>,
        T: Copy + Into<f64>,
    {
        if pred.len() != target.len() {
            return Err(Error::Shape(format!(
                "{} predictions vs {} targets",
                pred.len(),
                target.len()
            )));
        }
        let mut c = Self::default();
        for (&p, &y) in pred.iter().zip(target) {
            c.record(p.into() > threshold, y.into() > 0.5);
        }
        Ok(c)
    }

    #[inline]
    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => self.tn += 1,
        }
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

impl Sum for ConfusionCounts {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(Self::default(), Add::add)
    }
}

/// Threshold `pred_prob` and tally against a binary `target` of the same shape.
pub fn confusion_counts(pred_prob: &Tensor, target: &Tensor, threshold: f64) -> Result<ConfusionCounts> {
    if pred_prob.dims() != target.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            pred_prob.dims(),
            target.dims()
        )));
    }
    if !(threshold >= 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside [0, 1)")));
    }
    let p = pred_prob.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    let y = target.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    ConfusionCounts::from_slices(&p, &y, threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub iou: f64,
    pub n_images: usize,
    pub threshold: f64,
    pub counts: ConfusionCounts,
}

/// `num / den`, with 0/0 resolved to 1 only when nothing was predicted or
/// present at all (`both_empty`), else 0.
fn ratio(num: u64, den: u64, both_empty: bool) -> f64 {
    if den == 0 {
        if both_empty {
            1.0
        } else {
            0.0
        }
    } else {
        num as f64 / den as f64
    }
}

pub fn compute_metrics(c: &ConfusionCounts) -> MetricReport {
    let both_empty = c.tp + c.fp + c.fn_ == 0;
    MetricReport {
        accuracy: ratio(c.tp + c.tn, c.total(), true),
        precision: ratio(c.tp, c.tp + c.fp, both_empty),
        recall: ratio(c.tp, c.tp + c.fn_, both_empty),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_, both_empty),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_, both_empty),
        n_images: 0,
        threshold: 0.5,
        counts: *c,
    }
}

/// Micro-average: sum counts over all entries (one per image), then compute once.
pub fn aggregate_report(per_image: &[ConfusionCounts], threshold: f64) -> Result<MetricReport> {
    if per_image.is_empty() {
        return Err(Error::Empty("no confusion counts to aggregate".into()));
    }
    let total: ConfusionCounts = per_image.iter().copied().sum();
    Ok(MetricReport {
        n_images: per_image.len(),
        threshold,
        ..compute_metrics(&total)
    })
}

impl MetricReport {
    pub fn values(&self) -> [f64; 5] {
        [self.accuracy, self.precision, self.recall, self.f1, self.iou]
    }

    /// `acc precision recall f1 iou` at three decimals.
    pub fn row(&self) -> String {
        self.values()
            .iter()
            .map(|v| format!("{v:.3}"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.row())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: u64, fp: u64, fn_: u64, tn: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, fn_, tn }
    }

    #[test]
    fn three_by_three_example() {
        let pred = [1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0];
        let target = [1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0];
        let c = ConfusionCounts::from_slices(&pred, &target, 0.5).unwrap();
        assert_eq!(c, counts(2, 1, 1, 5));
        let m = compute_metrics(&c);
        assert_eq!(m.accuracy, 7.0 / 9.0);
        assert_eq!(m.precision, 2.0 / 3.0);
        assert_eq!(m.recall, 2.0 / 3.0);
        assert_eq!(m.f1, 2.0 / 3.0);
        assert_eq!(m.iou, 0.5);
    }

    #[test]
    fn degenerate_conventions() {
        let m = compute_metrics(&counts(0, 0, 0, 10));
        assert_eq!(m.values(), [1.0; 5]);
        let m = compute_metrics(&counts(0, 9, 0, 0));
        assert_eq!((m.precision, m.recall, m.f1, m.iou), (0.0, 0.0, 0.0, 0.0));
        assert_eq!(m.accuracy, 0.0);
        let m = compute_metrics(&counts(0, 0, 3, 1));
        assert_eq!((m.precision, m.recall), (0.0, 0.0));
        let m = compute_metrics(&counts(5, 0, 0, 5));
        assert_eq!(m.values(), [1.0; 5]);
    }

    #[test]
    fn all_positive_prediction_on_empty_target() {
        let c = ConfusionCounts::from_slices(&[1.0f64; 9], &[0.0f64; 9], 0.5).unwrap();
        assert_eq!(c, counts(0, 9, 0, 0));
    }

    #[test]
    fn aggregation() {
        let c = counts(3, 2, 1, 10);
        let one = aggregate_report(&[c], 0.5).unwrap();
        assert_eq!(one.values(), compute_metrics(&c).values());
        let two = aggregate_report(&[c, c], 0.5).unwrap();
        assert_eq!(two.values(), one.values());
        assert_eq!(two.n_images, 2);
        assert!(aggregate_report(&[], 0.5).is_err());
    }

    #[test]
    fn row_rendering() {
        let report = MetricReport {
            accuracy: 0.9712,
            precision: 0.8041,
            recall: 0.7438,
            f1: 0.7704,
            iou: 0.6301,
            n_images: 1200,
            threshold: 0.5,
            counts: ConfusionCounts::default(),
        };
        assert_eq!(report.row(), "0.971 0.804 0.744 0.770 0.630");
        // a single count set with the same precision/recall forces f1 = 2pr/(p+r)
        let m = compute_metrics(&counts(8040, 1960, 2766, 150_000));
        assert_eq!(m.row(), "0.971 0.804 0.744 0.773 0.630");
    }
}
