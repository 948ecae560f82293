// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeSet;

use super::{AbsenceAnnotation, CountingHypothesis, RuleContext, RuleSet};
use crate::error::{Error, Result};
use crate::numkernel::TensorF32;
use crate::sae::ActivationIndex;

/// Looks for a key `k'` that the top rule's query prefers over its key
/// (`A(q, k') > A(q, k)`) and whose value score is negative. Among those the
/// largest `A(q, k')` wins, lowest index on ties.
pub fn detect_distractor(rules: &RuleSet, ctx: &RuleContext<'_>) -> Result<Option<AbsenceAnnotation>> {
    let Some(top) = rules.top() else {
        return Ok(None);
    };
    let n = ctx.sae_in.n_features();
    if top.query.index >= n || top.key.index >= n {
        return Err(Error::InvalidArgument(format!(
            "rule ({}, {}) outside dictionary of {n}",
            top.key.index, top.query.index
        )));
    }
    let att = ctx.attention_scores_from_query(top.query.index)?;
    let values = ctx.value_scores()?;
    let reference = att[top.key.index];
    let mut best: Option<usize> = None;
    for k in 0..n {
        if att[k] > reference && values[k] < 0.0 && best.is_none_or(|b| att[k] > att[b]) {
            best = Some(k);
        }
    }
    Ok(best.map(|k| AbsenceAnnotation {
        rule: 0,
        distractor: ctx.feature_ref(k),
        distractor_attention: att[k],
        distractor_value: values[k],
    }))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountingStatistics {
    /// Pearson correlation; `None` when either side has zero variance or
    /// there are fewer than two samples.
    pub correlation: Option<f64>,
    pub distinct_counts: usize,
    pub samples: usize,
}

impl CountingStatistics {
    /// Correlation with the undefined case read as 0.
    pub fn correlation_or_zero(&self) -> f64 {
        self.correlation.unwrap_or(0.0)
    }
}

fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    let n = xs.len() as f64;
    if xs.len() < 2 {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some(sxy / (sxx.sqrt() * syy.sqrt()))
}

/// Correlates the output feature's activation with the number of positions
/// `≤ t` where `key` is active, over every active position of the given
/// exemplar sequences. Each exemplar is `(sequence id, input features)`.
pub fn counting_statistics(
    key: usize,
    index: &ActivationIndex,
    output_feature: usize,
    exemplars: &[(usize, TensorF32)],
) -> Result<CountingStatistics> {
    if output_feature >= index.n_features() {
        return Err(Error::InvalidArgument(format!(
            "output feature {output_feature} outside index of {}",
            index.n_features()
        )));
    }
    let records = index.records(output_feature);
    let (mut counts, mut acts) = (Vec::new(), Vec::new());
    for (seq, feats) in exemplars {
        let (len, n) = feats.dims2()?;
        if key >= n {
            return Err(Error::InvalidArgument(format!("key {key} outside dictionary of {n}")));
        }
        let start = records.partition_point(|r| r.seq < *seq);
        let end = records.partition_point(|r| r.seq <= *seq);
        let mut running = Vec::with_capacity(len);
        let mut c = 0usize;
        for i in 0..len {
            if feats.get2(i, key) > 0.0 {
                c += 1;
            }
            running.push(c);
        }
        for r in &records[start..end] {
            if r.pos >= len {
                return Err(Error::InvalidArgument(format!(
                    "index position {} beyond exemplar {seq} of length {len}",
                    r.pos
                )));
            }
            counts.push(running[r.pos] as f64);
            acts.push(f64::from(r.act));
        }
    }
    let distinct: BTreeSet<u64> = counts.iter().map(|&c| c as u64).collect();
    Ok(CountingStatistics {
        correlation: pearson(&counts, &acts),
        distinct_counts: distinct.len(),
        samples: counts.len(),
    })
}

/// Emits a counting hypothesis for the top rule's key when the correlation
/// reaches `threshold` and at least `min_spread` distinct counts occur.
pub fn detect_counting(
    rules: &RuleSet,
    index: &ActivationIndex,
    exemplars: &[(usize, TensorF32)],
    threshold: f64,
    min_spread: usize,
) -> Result<Option<CountingHypothesis>> {
    let Some(top) = rules.top() else {
        return Ok(None);
    };
    let stats = counting_statistics(top.key.index, index, rules.output_feature.index, exemplars)?;
    match stats.correlation {
        Some(c) if c >= threshold && stats.distinct_counts >= min_spread => Ok(Some(CountingHypothesis {
            key: top.key.clone(),
            correlation: c,
            sample_count: stats.samples,
        })),
        _ => Ok(None),
    }
}
