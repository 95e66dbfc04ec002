use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary confusion counts with respect to the task's positive class.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl ConfusionCounts {
    /// Tallies `(predicted, actual)` label pairs; 1 is positive.
    pub fn from_labels(predicted: &[usize], actual: &[usize]) -> Result<Self> {
        if predicted.len() != actual.len() {
            return Err(Error::invalid(
                "confusion counts",
                format!("{} predictions for {} labels", predicted.len(), actual.len()),
            ));
        }
        let mut c = Self::default();
        for (&p, &a) in predicted.iter().zip(actual) {
            match (p, a) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 0) => c.tn += 1,
                (0, 1) => c.fn_ += 1,
                _ => return Err(Error::invalid("confusion counts", format!("non-binary label pair ({p}, {a})"))),
            }
        }
        Ok(c)
    }

    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&self, other: &Self) -> Self {
        Self {
            tp: self.tp + other.tp,
            fp: self.fp + other.fp,
            tn: self.tn + other.tn,
            fn_: self.fn_ + other.fn_,
        }
    }
}

/// Derived metrics. `None` marks an empty denominator (undefined).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub f1: Option<f64>,
}

impl Metrics {
    pub const NAMES: [&'static str; 4] = ["accuracy", "sensitivity", "specificity", "f1"];

    pub fn values(&self) -> [Option<f64>; 4] {
        [self.accuracy, self.sensitivity, self.specificity, self.f1]
    }

    pub fn from_values(v: [Option<f64>; 4]) -> Self {
        Self {
            accuracy: v[0],
            sensitivity: v[1],
            specificity: v[2],
            f1: v[3],
        }
    }
}

fn ratio(num: usize, den: usize) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(c: &ConfusionCounts) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(Error::invalid("metrics", "no evaluated images"));
    }
    Ok(Metrics {
        accuracy: ratio(c.tp + c.tn, c.total()),
        sensitivity: ratio(c.tp, c.tp + c.fn_),
        specificity: ratio(c.tn, c.tn + c.fp),
        f1: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    })
}

/// Mean of one metric over the folds where it is defined.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricMean {
    pub mean: Option<f64>,
    /// Folds left out because the metric was undefined there.
    pub excluded: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub accuracy: MetricMean,
    pub sensitivity: MetricMean,
    pub specificity: MetricMean,
    pub f1: MetricMean,
}

impl Aggregate {
    pub fn means(&self) -> Metrics {
        Metrics {
            accuracy: self.accuracy.mean,
            sensitivity: self.sensitivity.mean,
            specificity: self.specificity.mean,
            f1: self.f1.mean,
        }
    }

    /// An aggregate holding given means and no exclusions.
    pub fn from_means(m: Metrics) -> Self {
        let wrap = |mean| MetricMean {
            mean,
            excluded: Vec::new(),
        };
        Self {
            accuracy: wrap(m.accuracy),
            sensitivity: wrap(m.sensitivity),
            specificity: wrap(m.specificity),
            f1: wrap(m.f1),
        }
    }
}

/// Unweighted mean per metric across folds, summed in input order.
pub fn aggregate(folds: &[(String, Metrics)]) -> Aggregate {
    let summarize = |pick: fn(&Metrics) -> Option<f64>| {
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut excluded = Vec::new();
        for (id, m) in folds {
            match pick(m) {
                Some(v) => {
                    sum += v;
                    n += 1;
                }
                None => excluded.push(id.clone()),
            }
        }
        MetricMean {
            mean: (n > 0).then(|| sum / n as f64),
            excluded,
        }
    };
    Aggregate {
        accuracy: summarize(|m| m.accuracy),
        sensitivity: summarize(|m| m.sensitivity),
        specificity: summarize(|m| m.specificity),
        f1: summarize(|m| m.f1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn counts(tp: usize, fp: usize, tn: usize, fn_: usize) -> ConfusionCounts {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    #[test]
    fn perfect_classifier() {
        let m = metrics(&counts(5, 0, 5, 0)).unwrap();
        assert_eq!(m.values(), [Some(1.0); 4]);
    }

    #[test]
    fn worked_example() {
        let m = metrics(&counts(3, 1, 5, 1)).unwrap();
        assert!((m.accuracy.unwrap() - 0.8).abs() < 1e-12);
        assert!((m.sensitivity.unwrap() - 0.75).abs() < 1e-12);
        assert!((m.specificity.unwrap() - 5.0 / 6.0).abs() < 1e-12);
        assert!((m.f1.unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn undefined_sensitivity_without_positives() {
        let m = metrics(&counts(0, 2, 3, 0)).unwrap();
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.specificity, Some(0.6));
        assert!(metrics(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn aggregation() {
        let m = |a| Metrics::from_values([Some(a), Some(a), Some(a), Some(a)]);
        let agg = aggregate(&[("A".into(), m(0.8)), ("B".into(), m(1.0))]);
        assert!((agg.accuracy.mean.unwrap() - 0.9).abs() < 1e-15);
        let single = aggregate(&[("A".into(), m(0.37))]);
        assert_eq!(single.means(), m(0.37));
        let with_gap = aggregate(&[
            ("A".into(), Metrics::from_values([Some(0.5), None, Some(1.0), Some(0.2)])),
            ("B".into(), m(1.0)),
        ]);
        assert_eq!(with_gap.sensitivity.mean, Some(1.0));
        assert_eq!(with_gap.sensitivity.excluded, vec!["A"]);
        assert!(with_gap.accuracy.excluded.is_empty());
    }

    #[test]
    fn from_labels_counts() {
        let c = ConfusionCounts::from_labels(&[1, 1, 0, 0, 1], &[1, 0, 0, 1, 1]).unwrap();
        assert_eq!(c, counts(2, 1, 1, 1));
        assert!(ConfusionCounts::from_labels(&[2], &[0]).is_err());
        assert!(ConfusionCounts::from_labels(&[1], &[]).is_err());
    }
}
