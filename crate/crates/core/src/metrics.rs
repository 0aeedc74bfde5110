//! Segmentation and boundary metrics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let classes = rows.len();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::Shape("confusion matrix must be square".into()));
        }
        Ok(Self {
            classes,
            counts: rows.iter().flatten().copied().collect(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, truth: usize, pred: usize) -> Result<()> {
        if truth >= self.classes || pred >= self.classes {
            return Err(Error::Range(format!(
                "class pair ({truth}, {pred}) outside {} classes",
                self.classes
            )));
        }
        self.counts[truth * self.classes + pred] += 1;
        Ok(())
    }

    pub fn accumulate(&mut self, truth: &[usize], pred: &[usize]) -> Result<()> {
        if truth.len() != pred.len() {
            return Err(Error::Shape(format!(
                "{} labels vs {} predictions",
                truth.len(),
                pred.len()
            )));
        }
        truth.iter().zip(pred).try_for_each(|(&t, &p)| self.add(t, p))
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Shape("cannot merge matrices of different class counts".into()));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// IoU per class; `None` where the class never occurs in truth or prediction.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                let tp = self.get(c, c);
                let fn_: u64 = (0..self.classes).filter(|&p| p != c).map(|p| self.get(c, p)).sum();
                let fp: u64 = (0..self.classes).filter(|&t| t != c).map(|t| self.get(t, c)).sum();
                let denom = tp + fp + fn_;
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (0..self.classes).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64)
    }
}

/// Mean IoU over classes that occur in truth or prediction.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    let ious: Vec<f64> = cm.class_iou().into_iter().flatten().collect();
    if ious.is_empty() {
        return Err(Error::UndefinedMetric("mIoU of an empty confusion matrix".into()));
    }
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

/// Binary detection counts with "boundary" as the positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundaryCounts {
    pub true_pos: u64,
    pub false_pos: u64,
    pub false_neg: u64,
    pub true_neg: u64,
}

impl BoundaryCounts {
    /// `truth_boundary[i]` / `pred_boundary[i]` are true where point `i` is a boundary point.
    pub fn accumulate(&mut self, truth_boundary: &[bool], pred_boundary: &[bool]) -> Result<()> {
        if truth_boundary.len() != pred_boundary.len() {
            return Err(Error::Shape("boundary masks differ in length".into()));
        }
        for (&t, &p) in truth_boundary.iter().zip(pred_boundary) {
            match (t, p) {
                (true, true) => self.true_pos += 1,
                (false, true) => self.false_pos += 1,
                (true, false) => self.false_neg += 1,
                (false, false) => self.true_neg += 1,
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &BoundaryCounts) {
        self.true_pos += other.true_pos;
        self.false_pos += other.false_pos;
        self.false_neg += other.false_neg;
        self.true_neg += other.true_neg;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_pos)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.true_pos, self.true_pos + self.false_neg)
    }

    pub fn f1(&self) -> f64 {
        let p = self.precision();
        let r = self.recall();
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_prediction() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 2, 2], &[0, 1, 2, 2]).unwrap();
        assert_eq!(miou(&cm).unwrap(), 1.0);
    }

    #[test]
    fn hand_computed_two_class() {
        let cm = ConfusionMatrix::from_counts(&[vec![1, 1], vec![0, 2]]).unwrap();
        let v = miou(&cm).unwrap();
        assert!((v - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn empty_matrix_undefined() {
        assert!(matches!(miou(&ConfusionMatrix::new(2)), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn absent_class_excluded() {
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&[0, 1], &[0, 1]).unwrap();
        assert_eq!(miou(&cm).unwrap(), 1.0);
    }

    #[test]
    fn relabeled_perfect_prediction() {
        let perm = [2usize, 0, 3, 1];
        let truth = [0usize, 1, 1, 2, 3, 3, 0];
        let relabeled: Vec<usize> = truth.iter().map(|&t| perm[t]).collect();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&relabeled, &relabeled).unwrap();
        assert_eq!(miou(&cm).unwrap(), 1.0);
    }

    #[test]
    fn boundary_scores() {
        let mut b = BoundaryCounts::default();
        b.accumulate(&[true, true, false, false], &[true, false, true, false])
            .unwrap();
        assert_eq!(b.precision(), 0.5);
        assert_eq!(b.recall(), 0.5);
        assert_eq!(b.f1(), 0.5);
    }
}
