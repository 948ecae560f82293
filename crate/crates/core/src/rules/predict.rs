// SPDX-License-Identifier: MIT OR Apache-2.0

use super::RuleSet;
use crate::error::{Error, Result};
use crate::numkernel::TensorF32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PredictOptions {
    /// Suppress an annotated rule when its distractor occurs in the prefix.
    pub absence_aware: bool,
}

/// Strength of the best firing rule among the first `top_n`:
/// `max A · S · f_q(x_t) · max_{t' ≤ t} f_k(x_t')`, or 0 when none fires.
/// Only admissible rules (both scores positive) are considered.
pub fn predict_score(
    rules: &RuleSet,
    features: &TensorF32,
    t: usize,
    top_n: usize,
    options: PredictOptions,
) -> Result<f64> {
    let (len, n) = features.dims2()?;
    if t >= len {
        return Err(Error::InvalidArgument(format!(
            "position {t} outside sequence of length {len}"
        )));
    }
    let prefix_max = |j: usize| -> Result<f32> {
        if j >= n {
            return Err(Error::InvalidArgument(format!(
                "feature {j} outside dictionary of {n}"
            )));
        }
        Ok((0..=t).map(|i| features.get2(i, j)).fold(0.0f32, f32::max))
    };
    let mut best = 0.0f64;
    for (ri, rule) in rules.rules.iter().take(top_n).enumerate() {
        if !rule.is_admissible() {
            continue;
        }
        if rule.query.index >= n {
            return Err(Error::InvalidArgument(format!(
                "feature {} outside dictionary of {n}",
                rule.query.index
            )));
        }
        let fq = features.get2(t, rule.query.index);
        if fq <= 0.0 {
            continue;
        }
        let fk = prefix_max(rule.key.index)?;
        if fk <= 0.0 {
            continue;
        }
        if options.absence_aware {
            if let Some(abs) = rules.absence.as_ref().filter(|a| a.rule == ri) {
                if prefix_max(abs.distractor.index)? > 0.0 {
                    continue;
                }
            }
        }
        best = best.max(rule.weight() * f64::from(fq) * f64::from(fk));
    }
    Ok(best)
}

/// Whether any admissible rule among the first `top_n` fires at `t`: its
/// query is active at `t` and its key somewhere in `0..=t`.
pub fn predict_active(
    rules: &RuleSet,
    features: &TensorF32,
    t: usize,
    top_n: usize,
    options: PredictOptions,
) -> Result<bool> {
    Ok(predict_score(rules, features, t, top_n, options)? > 0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::{AbsenceAnnotation, FeatureRef, RankMethod, SkipGramRule};

    fn rule(key: usize, query: usize, s: f32, a: f32) -> SkipGramRule {
        SkipGramRule {
            key: FeatureRef::new("in", key),
            query: FeatureRef::new("in", query),
            value_score: s,
            attention_score: a,
            importance: None,
        }
    }

    fn onehot(tokens: &[usize], n: usize) -> TensorF32 {
        let rows: Vec<Vec<f32>> = tokens
            .iter()
            .map(|&t| (0..n).map(|j| if j == t { 1.0 } else { 0.0 }).collect())
            .collect();
        TensorF32::from_rows(&rows, n).unwrap()
    }

    fn set(rules: Vec<SkipGramRule>) -> RuleSet {
        RuleSet::new(FeatureRef::new("out", 0), RankMethod::Weight, rules)
    }

    #[test]
    fn fires_on_key_then_query() {
        let rs = set(vec![rule(1, 2, 1.0, 1.0)]);
        let f = onehot(&[0, 1, 3, 2], 4);
        assert!(predict_active(&rs, &f, 3, 1, PredictOptions::default()).unwrap());
        assert!(!predict_active(&rs, &f, 2, 1, PredictOptions::default()).unwrap());
        let rev = onehot(&[0, 2, 1], 4);
        assert!(!predict_active(&rs, &rev, 1, 1, PredictOptions::default()).unwrap());
    }

    #[test]
    fn key_and_query_may_coincide_at_t() {
        let rs = set(vec![rule(2, 2, 1.0, 1.0)]);
        let f = onehot(&[0, 2], 4);
        assert!(predict_active(&rs, &f, 1, 1, PredictOptions::default()).unwrap());
    }

    #[test]
    fn inadmissible_rules_never_fire() {
        let rs = set(vec![rule(1, 2, -1.0, 1.0), rule(1, 2, 1.0, 0.0)]);
        let f = onehot(&[1, 2], 4);
        assert!(!predict_active(&rs, &f, 1, 2, PredictOptions::default()).unwrap());
    }

    #[test]
    fn top_n_limits_rules_and_clamps() {
        let rs = set(vec![rule(0, 3, 1.0, 1.0), rule(1, 2, 1.0, 1.0)]);
        let f = onehot(&[1, 2], 4);
        assert!(!predict_active(&rs, &f, 1, 1, PredictOptions::default()).unwrap());
        assert!(predict_active(&rs, &f, 1, 2, PredictOptions::default()).unwrap());
        assert!(predict_active(&rs, &f, 1, 50, PredictOptions::default()).unwrap());
        assert!(!predict_active(&rs, &f, 1, 0, PredictOptions::default()).unwrap());
    }

    #[test]
    fn absence_awareness_suppresses_annotated_rule() {
        let mut rs = set(vec![rule(1, 2, 1.0, 1.0)]);
        rs.absence = Some(AbsenceAnnotation {
            rule: 0,
            distractor: FeatureRef::new("in", 3),
            distractor_attention: 2.0,
            distractor_value: -1.0,
        });
        let f = onehot(&[1, 3, 2], 4);
        assert!(predict_active(&rs, &f, 2, 1, PredictOptions::default()).unwrap());
        let aware = PredictOptions { absence_aware: true };
        assert!(!predict_active(&rs, &f, 2, 1, aware).unwrap());
        let clean = onehot(&[1, 0, 2], 4);
        assert!(predict_active(&rs, &clean, 2, 1, aware).unwrap());
    }

    #[test]
    fn score_takes_the_strongest_rule() {
        let rs = set(vec![rule(1, 2, 1.0, 1.0), rule(0, 2, 2.0, 3.0)]);
        let f = onehot(&[0, 1, 2], 4);
        assert_eq!(predict_score(&rs, &f, 2, 2, PredictOptions::default()).unwrap(), 6.0);
        assert!(predict_score(&rs, &f, 3, 2, PredictOptions::default()).is_err());
    }
}
