// SPDX-License-Identifier: MIT OR Apache-2.0

use std::cmp::Ordering;

use super::{RuleContext, SkipGramRule};
use crate::error::Result;

/// Indices of the `k` largest values, ties broken by ascending index.
pub(crate) fn top_k_indices(values: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k.min(values.len()));
    idx
}

/// Top `k_keys` keys by value score, then for each key the top `k_queries`
/// queries by attention score. Both limits clamp to the dictionary size.
///
/// Output is key-major in selection order.
pub fn select_candidates(ctx: &RuleContext<'_>, k_keys: usize, k_queries: usize) -> Result<Vec<SkipGramRule>> {
    let values = ctx.value_scores()?;
    let keys = top_k_indices(&values, k_keys);
    let mut out = Vec::with_capacity(keys.len() * k_queries.min(values.len()));
    for key in keys {
        let att = ctx.attention_scores_to_key(key)?;
        for query in top_k_indices(&att, k_queries) {
            out.push(SkipGramRule {
                key: ctx.feature_ref(key),
                query: ctx.feature_ref(query),
                value_score: values[key],
                attention_score: att[query],
                importance: None,
            });
        }
    }
    Ok(out)
}

pub(crate) fn tie_break(a: &SkipGramRule, b: &SkipGramRule) -> Ordering {
    (a.key.index, a.query.index).cmp(&(b.key.index, b.query.index))
}

/// Sorts by `A · S` descending, then `(key, query)` ascending.
pub fn rank_weight_based(mut candidates: Vec<SkipGramRule>) -> Vec<SkipGramRule> {
    candidates.sort_by(|a, b| b.weight().total_cmp(&a.weight()).then_with(|| tie_break(a, b)));
    candidates
}
