//! Balanced binary metrics.
//!
//! All rates are computed per class, so every metric is invariant to class
//! prevalence: precision is taken as if both classes had equal mass,
//! `TPR / (TPR + FPR)`. A classifier that ignores its input scores 0.5
//! balanced accuracy whatever its positive rate.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature_store::{Category, LabelEntry};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn positives(&self) -> u64 {
        self.tp + self.fn_
    }

    pub fn negatives(&self) -> u64 {
        self.fp + self.tn
    }

    pub fn record(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, false) => self.tn += 1,
            (false, true) => self.fn_ += 1,
        }
    }
}

pub fn confusion(predictions: &[bool], labels: &[bool]) -> Result<ConfusionCounts> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    if predictions.is_empty() {
        return Err(Error::DegenerateInput("no predictions"));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in predictions.iter().zip(labels) {
        c.record(p, y);
    }
    Ok(c)
}

/// Undefined values (division by zero) are `None` and serialize as `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalancedMetrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: f64,
    pub f1: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Accuracy,
    Precision,
    Recall,
    F1,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Accuracy, Metric::Precision, Metric::Recall, Metric::F1];

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Accuracy => "accuracy",
            Metric::Precision => "precision",
            Metric::Recall => "recall",
            Metric::F1 => "f1",
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl BalancedMetrics {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        match metric {
            Metric::Accuracy => Some(self.accuracy),
            Metric::Precision => self.precision,
            Metric::Recall => Some(self.recall),
            Metric::F1 => self.f1,
        }
    }

    pub fn values(&self) -> [Option<f64>; 4] {
        Metric::ALL.map(|m| self.get(m))
    }
}

pub fn balanced_metrics(c: &ConfusionCounts) -> Result<BalancedMetrics> {
    if c.positives() == 0 || c.negatives() == 0 {
        return Err(Error::ClassAbsent {
            positives: c.positives(),
            negatives: c.negatives(),
        });
    }
    let tpr = c.tp as f64 / c.positives() as f64;
    let tnr = c.tn as f64 / c.negatives() as f64;
    let fpr = c.fp as f64 / c.negatives() as f64;

    let precision = (tpr + fpr > 0.0).then(|| tpr / (tpr + fpr));
    let f1 = precision.map(|p| {
        if p + tpr > 0.0 {
            2.0 * p * tpr / (p + tpr)
        } else {
            0.0
        }
    });
    Ok(BalancedMetrics {
        accuracy: (tpr + tnr) / 2.0,
        precision,
        recall: tpr,
        f1,
    })
}

/// Unweighted mean of one metric over a group, ignoring undefined values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricMean {
    pub mean: Option<f64>,
    /// Members whose value was undefined and left out of the mean.
    pub excluded: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryAggregate {
    pub concepts: usize,
    pub accuracy: MetricMean,
    pub precision: MetricMean,
    pub recall: MetricMean,
    pub f1: MetricMean,
}

impl CategoryAggregate {
    pub fn get(&self, metric: Metric) -> &MetricMean {
        match metric {
            Metric::Accuracy => &self.accuracy,
            Metric::Precision => &self.precision,
            Metric::Recall => &self.recall,
            Metric::F1 => &self.f1,
        }
    }
}

fn mean_of(values: impl Iterator<Item = Option<f64>>) -> MetricMean {
    let (mut sum, mut n, mut excluded) = (0.0, 0usize, 0usize);
    for v in values {
        match v {
            Some(x) => {
                sum += x;
                n += 1;
            }
            None => excluded += 1,
        }
    }
    MetricMean {
        mean: (n > 0).then(|| sum / n as f64),
        excluded,
    }
}

/// Group per-concept metric values by category and average each metric.
pub fn aggregate_values(
    rows: impl IntoIterator<Item = (Category, [Option<f64>; 4])>,
) -> BTreeMap<Category, CategoryAggregate> {
    let mut groups: BTreeMap<Category, Vec<[Option<f64>; 4]>> = BTreeMap::new();
    for (cat, v) in rows {
        groups.entry(cat).or_default().push(v);
    }
    groups
        .into_iter()
        .map(|(cat, vals)| {
            let col = |i: usize| mean_of(vals.iter().map(|v| v[i]));
            (
                cat,
                CategoryAggregate {
                    concepts: vals.len(),
                    accuracy: col(0),
                    precision: col(1),
                    recall: col(2),
                    f1: col(3),
                },
            )
        })
        .collect()
}

pub fn aggregate_by_category(
    per_concept: &BTreeMap<u32, BalancedMetrics>,
    label_table: &[LabelEntry],
) -> Result<BTreeMap<Category, CategoryAggregate>> {
    let rows = per_concept
        .iter()
        .map(|(&id, m)| {
            label_table
                .iter()
                .find(|l| l.label_id == id)
                .map(|l| (l.category, m.values()))
                .ok_or(Error::UnknownLabel(id))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate_values(rows))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: Option<f64>,
    /// Population standard deviation (divisor N).
    pub std: Option<f64>,
    /// Trials where the metric was defined.
    pub defined: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrialSummary {
    pub trials: usize,
    pub accuracy: MetricSummary,
    pub precision: MetricSummary,
    pub recall: MetricSummary,
    pub f1: MetricSummary,
}

impl TrialSummary {
    pub fn get(&self, metric: Metric) -> &MetricSummary {
        match metric {
            Metric::Accuracy => &self.accuracy,
            Metric::Precision => &self.precision,
            Metric::Recall => &self.recall,
            Metric::F1 => &self.f1,
        }
    }

    pub fn means(&self) -> [Option<f64>; 4] {
        Metric::ALL.map(|m| self.get(m).mean)
    }
}

fn summarize(values: &[f64]) -> MetricSummary {
    if values.is_empty() {
        return MetricSummary {
            mean: None,
            std: None,
            defined: 0,
        };
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    MetricSummary {
        mean: Some(mean),
        std: Some(var.sqrt()),
        defined: values.len(),
    }
}

pub fn summarize_trials(per_trial: &[BalancedMetrics]) -> TrialSummary {
    let col = |m: Metric| {
        let vals: Vec<f64> = per_trial.iter().filter_map(|t| t.get(m)).collect();
        summarize(&vals)
    };
    TrialSummary {
        trials: per_trial.len(),
        accuracy: col(Metric::Accuracy),
        precision: col(Metric::Precision),
        recall: col(Metric::Recall),
        f1: col(Metric::F1),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn counts(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, fp, tn, fn_ }
    }

    #[test]
    fn confusion_examples() {
        assert_eq!(confusion(&[true, false], &[true, false]).unwrap(), counts(1, 0, 1, 0));
        assert_eq!(confusion(&[true, true], &[false, false]).unwrap(), counts(0, 2, 0, 0));
        assert_eq!(
            confusion(&[true, false, true, false], &[true, true, false, false]).unwrap(),
            counts(1, 1, 1, 1)
        );
        assert!(matches!(
            confusion(&[true], &[true, false]),
            Err(Error::LengthMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn always_positive_rule() {
        let m = balanced_metrics(&counts(50, 50, 0, 0)).unwrap();
        assert_eq!(m.accuracy, 0.5);
        assert_eq!(m.precision, Some(0.5));
        assert_eq!(m.recall, 1.0);
        assert!((m.f1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_and_never_positive() {
        let m = balanced_metrics(&counts(10, 0, 90, 0)).unwrap();
        assert_eq!(m.values(), [Some(1.0); 4]);

        let m = balanced_metrics(&counts(0, 0, 90, 10)).unwrap();
        assert_eq!(m.recall, 0.0);
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);
        assert_eq!(m.accuracy, 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(
            balanced_metrics(&counts(3, 0, 0, 2)),
            Err(Error::ClassAbsent { .. })
        ));
    }

    #[test]
    fn undefined_serializes_as_null() {
        let m = balanced_metrics(&counts(0, 0, 90, 10)).unwrap();
        let v = serde_json::to_value(m).unwrap();
        assert!(v["precision"].is_null());
        assert_eq!(v["recall"], 0.0);
    }

    fn m(acc: f64, prec: Option<f64>, f1: f64) -> BalancedMetrics {
        BalancedMetrics {
            accuracy: acc,
            precision: prec,
            recall: 0.5,
            f1: Some(f1),
        }
    }

    #[test]
    fn category_means() {
        let labels = vec![
            LabelEntry::new(1, Category::Part, "a"),
            LabelEntry::new(2, Category::Part, "b"),
            LabelEntry::new(3, Category::Part, "c"),
        ];
        let per: BTreeMap<_, _> = [(1, m(0.9, Some(0.6), 0.8)), (2, m(0.7, Some(0.8), 0.6))].into();
        let agg = aggregate_by_category(&per, &labels).unwrap();
        assert_eq!(agg.len(), 1);
        let part = agg[&Category::Part];
        assert!((part.f1.mean.unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(part.concepts, 2);

        let per: BTreeMap<_, _> = [
            (1, m(0.9, Some(0.6), 0.8)),
            (2, m(0.7, Some(0.8), 0.6)),
            (3, m(0.5, None, 0.0)),
        ]
        .into();
        let agg = aggregate_by_category(&per, &labels).unwrap();
        let part = agg[&Category::Part];
        assert!((part.precision.mean.unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(part.precision.excluded, 1);
        assert_eq!(part.accuracy.excluded, 0);
        assert!((part.accuracy.mean.unwrap() - 0.7).abs() < 1e-15);

        let unknown: BTreeMap<_, _> = [(9, m(0.5, None, 0.0))].into();
        assert!(aggregate_by_category(&unknown, &labels).is_err());
    }

    fn acc_only(a: f64) -> BalancedMetrics {
        BalancedMetrics {
            accuracy: a,
            precision: None,
            recall: a,
            f1: None,
        }
    }

    #[test]
    fn trial_summaries() {
        let s = summarize_trials(&[acc_only(0.8), acc_only(0.8), acc_only(0.8)]);
        assert!((s.accuracy.mean.unwrap() - 0.8).abs() < 1e-15);
        assert!(s.accuracy.std.unwrap() < 1e-15);
        assert_eq!(s.precision.mean, None);
        assert_eq!(s.trials, 3);

        let s = summarize_trials(&[acc_only(0.0), acc_only(1.0)]);
        assert_eq!(s.accuracy.mean, Some(0.5));
        assert_eq!(s.accuracy.std, Some(0.5));

        let s = summarize_trials(&[acc_only(0.3)]);
        assert_eq!(s.accuracy.std, Some(0.0));
    }

    proptest! {
        #[test]
        fn balanced_metrics_ignore_prevalence(
            tp in 0u64..500, fn_ in 0u64..500, fp in 0u64..500, tn in 0u64..500, m in 2u64..20,
        ) {
            prop_assume!(tp + fn_ > 0 && fp + tn > 0);
            let a = balanced_metrics(&counts(tp, fp, tn, fn_)).unwrap();
            let b = balanced_metrics(&counts(tp, fp * m, tn * m, fn_)).unwrap();
            for (x, y) in a.values().iter().zip(b.values()) {
                match (x, y) {
                    (Some(x), Some(y)) => prop_assert!((x - y).abs() <= 1e-12),
                    (None, None) => {}
                    _ => prop_assert!(false, "definedness changed"),
                }
            }
        }

        #[test]
        fn metrics_in_unit_interval_and_f1_zero_iff_recall_zero(
            tp in 0u64..100, fn_ in 0u64..100, fp in 0u64..100, tn in 0u64..100,
        ) {
            prop_assume!(tp + fn_ > 0 && fp + tn > 0);
            let b = balanced_metrics(&counts(tp, fp, tn, fn_)).unwrap();
            for v in b.values().into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            if let (Some(_), Some(f1)) = (b.precision, b.f1) {
                prop_assert_eq!(f1 == 0.0, b.recall == 0.0);
            }
        }
    }
}
