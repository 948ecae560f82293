// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Metrics {
    /// Precision is 1 when nothing is predicted positive; recall is 1 when
    /// nothing is actually positive. F1 is 0 when both are 0.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let precision = if tp + fp == 0 { 1.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_ == 0 { 1.0 } else { tp as f64 / (tp + fn_) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
        }
    }
}

pub fn binary_metrics(predicted: &[bool], actual: &[bool]) -> Result<Metrics> {
    if predicted.len() != actual.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} labels",
            predicted.len(),
            actual.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &a) in predicted.iter().zip(actual) {
        match (p, a) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_, tn))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_predictions() {
        let m = binary_metrics(&[true, false, true], &[true, false, true]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn nothing_predicted_has_precision_one() {
        let m = binary_metrics(&[false, false, false], &[true, false, true]).unwrap();
        assert_eq!((m.precision, m.recall, m.f1), (1.0, 0.0, 0.0));
    }

    #[test]
    fn hand_computed_case() {
        let m = binary_metrics(&[true, true], &[true, false]).unwrap();
        assert_eq!((m.tp, m.fp, m.fn_), (1, 1, 0));
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 1.0);
        assert!((m.f1 - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn no_actual_positives_has_recall_one() {
        let m = binary_metrics(&[true, false], &[false, false]).unwrap();
        assert_eq!((m.precision, m.recall), (0.0, 1.0));
        assert_eq!(m.f1, 0.0);
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(binary_metrics(&[true], &[]).is_err());
    }

    #[test]
    fn serializes_false_negatives_as_fn() {
        let v = serde_json::to_value(Metrics::from_counts(1, 2, 3, 4)).unwrap();
        assert_eq!(v["fn"], 3);
    }

    proptest! {
        #[test]
        fn bounded_and_harmonic(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50, tn in 0usize..50) {
            let m = Metrics::from_counts(tp, fp, fn_, tn);
            for v in [m.precision, m.recall, m.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
            let lo = m.precision.min(m.recall);
            prop_assert!(m.f1 <= 2.0 * lo / (1.0 + lo) + 1e-12);
            prop_assert!(m.f1 >= lo - 1e-12 || m.f1 == 0.0);
        }
    }
}
