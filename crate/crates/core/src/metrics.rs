//! Accuracy, per-class F1 and macro-F1 from a confusion matrix.

use crate::error::{contract, Error, Result};

/// Rows index the true class, columns the predicted class.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    counts: Vec<Vec<u64>>,
}

impl Confusion {
    pub fn new(classes: usize) -> Self {
        Self {
            counts: vec![vec![0; classes]; classes],
        }
    }

    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let c = counts.len();
        if counts.iter().any(|r| r.len() != c) {
            return Err(contract("confusion matrix must be square"));
        }
        Ok(Self { counts })
    }

    pub fn from_predictions(predicted: &[usize], actual: &[usize], classes: usize) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::Shape {
                op: "confusion",
                left: vec![predicted.len()],
                right: vec![actual.len()],
            });
        }
        let mut m = Self::new(classes);
        for (&p, &a) in predicted.iter().zip(actual) {
            for x in [p, a] {
                if x >= classes {
                    return Err(Error::Index {
                        what: "class",
                        index: x,
                        bound: classes,
                    });
                }
            }
            m.counts[a][p] += 1;
        }
        Ok(m)
    }

    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn counts(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..self.classes()).map(|i| self.counts[i][i]).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalResult {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub per_class_f1: Vec<f64>,
    pub confusion: Confusion,
    /// Classes with neither true nor predicted instances; their F1 is 0.
    pub empty_classes: Vec<usize>,
}

impl EvalResult {
    pub fn from_confusion(confusion: Confusion) -> Result<Self> {
        let total = confusion.total();
        if total == 0 {
            return Err(contract("cannot evaluate on empty data"));
        }
        let c = confusion.classes();
        let counts = confusion.counts();
        let mut per_class_f1 = Vec::with_capacity(c);
        let mut empty_classes = Vec::new();
        for k in 0..c {
            let tp = counts[k][k] as f64;
            let actual: u64 = counts[k].iter().sum();
            let predicted: u64 = counts.iter().map(|r| r[k]).sum();
            if actual == 0 && predicted == 0 {
                empty_classes.push(k);
            }
            let precision = if predicted == 0 {
                0.0
            } else {
                tp / predicted as f64
            };
            let recall = if actual == 0 { 0.0 } else { tp / actual as f64 };
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            per_class_f1.push(f1);
        }
        let macro_f1 = per_class_f1.iter().sum::<f64>() / c as f64;
        Ok(Self {
            accuracy: confusion.correct() as f64 / total as f64,
            macro_f1,
            per_class_f1,
            confusion,
            empty_classes,
        })
    }

    pub fn from_predictions(predicted: &[usize], actual: &[usize], classes: usize) -> Result<Self> {
        Self::from_confusion(Confusion::from_predictions(predicted, actual, classes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let r = EvalResult::from_predictions(&[0, 1, 2, 1], &[0, 1, 2, 1], 3).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.macro_f1, 1.0);
        assert!(r.empty_classes.is_empty());
    }

    #[test]
    fn hand_worked_confusion() {
        let c = Confusion::from_counts(vec![vec![2, 0, 0], vec![0, 1, 1], vec![0, 0, 2]]).unwrap();
        let r = EvalResult::from_confusion(c).unwrap();
        assert!((r.accuracy - 5.0 / 6.0).abs() < 1e-15);
        let want = [1.0, 2.0 / 3.0, 0.8];
        for (got, w) in r.per_class_f1.iter().zip(want) {
            assert!((got - w).abs() < 1e-15);
        }
        assert!((r.macro_f1 - 0.822_222_222_222).abs() < 1e-9);
    }

    #[test]
    fn all_predicted_as_first_class() {
        let actual: Vec<usize> = (0..30).map(|i| i % 3).collect();
        let r = EvalResult::from_predictions(&[0; 30], &actual, 3).unwrap();
        assert!((r.accuracy - 1.0 / 3.0).abs() < 1e-15);
        assert!((r.macro_f1 - 0.5 / 3.0).abs() < 1e-15);
        assert!(r.empty_classes.is_empty());
    }

    #[test]
    fn absent_class_is_flagged() {
        let r = EvalResult::from_predictions(&[0, 1, 1], &[0, 1, 0], 3).unwrap();
        assert_eq!(r.empty_classes, vec![2]);
        assert_eq!(r.per_class_f1[2], 0.0);
    }

    #[test]
    fn empty_data_is_an_error() {
        assert!(EvalResult::from_predictions(&[], &[], 3).is_err());
    }
}
