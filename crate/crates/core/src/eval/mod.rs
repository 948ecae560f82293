// SPDX-License-Identifier: MIT OR Apache-2.0

//! Exemplar datasets, binary metrics, attribution, interventions and reports.

mod attribution;
mod dataset;
mod metrics;
mod report;

pub use attribution::{dfa, input_features, intervene_prepend, intervene_series, output_activations, pick_distractor_token};
pub use dataset::{build_exemplar_dataset, Exemplar, ExemplarDataset, Split};
pub use metrics::{binary_metrics, Metrics};
pub use report::{
    aggregate_report, read_feature_csv, write_aggregate_csv, write_feature_csv, write_intervention_csv,
    AggregateRow, FeatureMetricsRow, Grouping, InterventionRow, AGGREGATE_CSV_HEADER, FEATURE_CSV_HEADER,
};

use rayon::prelude::*;

use crate::error::Result;
use crate::model::{TokenSequence, ToyModel};
use crate::rules::{predict_active, PredictOptions, RuleSet};
use crate::sae::SaeDictionary;

/// Scores `rules` on one split of `dataset` for every `top_n` in `sweep`.
pub fn evaluate_ruleset(
    model: &ToyModel,
    sae_in: &SaeDictionary,
    rules: &RuleSet,
    dataset: &ExemplarDataset,
    split: Split,
    sweep: &[usize],
    options: PredictOptions,
) -> Result<Vec<(usize, Metrics)>> {
    let items: Vec<(&Exemplar, bool)> = dataset.split(split).collect();
    let features: Vec<_> = items
        .par_iter()
        .map(|(e, _)| input_features(model, sae_in, &TokenSequence::new(e.tokens.clone())))
        .collect::<Result<_>>()?;
    let actual: Vec<bool> = items.iter().map(|(_, p)| *p).collect();
    sweep
        .iter()
        .map(|&top_n| {
            let predicted = items
                .iter()
                .zip(&features)
                .map(|((e, _), f)| predict_active(rules, f, e.target, top_n, options))
                .collect::<Result<Vec<bool>>>()?;
            Ok((top_n, binary_metrics(&predicted, &actual)?))
        })
        .collect()
}
