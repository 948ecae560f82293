// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::numkernel::SeedTree;
use crate::rules::FeatureRef;
use crate::sae::ActivationIndex;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    fn of_rank(rank: usize, len: usize) -> Split {
        Split::ALL[rank * 3 / len.max(1)]
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

/// One labelled prefix: the sequence and the (0-indexed) position to predict.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Exemplar {
    pub seq: usize,
    pub tokens: Vec<usize>,
    pub target: usize,
    pub activation: f32,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarDataset {
    pub feature: FeatureRef,
    pub positives: Vec<Exemplar>,
    pub negatives: Vec<Exemplar>,
    pub seed: u64,
}

impl ExemplarDataset {
    /// `(exemplar, is_positive)` pairs of one split, positives first.
    pub fn split(&self, split: Split) -> impl Iterator<Item = (&Exemplar, bool)> {
        self.positives
            .iter()
            .map(|e| (e, true))
            .chain(self.negatives.iter().map(|e| (e, false)))
            .filter(move |(e, _)| e.split == split)
    }
}

/// Builds a balanced dataset for `feature`.
///
/// Positives are the `n` sequences with the highest maximum activation
/// (ties by sequence id), targeted at the first position of that maximum.
/// Negatives are `n` sequences drawn without replacement from those where the
/// feature never fires, each targeted at a uniform position in `1..len`
/// (0-indexed, so the first token is never a target). Each class is
/// shuffled and cut into train/val/test thirds.
pub fn build_exemplar_dataset(
    index: &ActivationIndex,
    feature: usize,
    feature_ref: FeatureRef,
    corpus: &[TokenSequence],
    n: usize,
    seed: u64,
) -> Result<ExemplarDataset> {
    if feature >= index.n_features() {
        return Err(Error::InvalidArgument(format!(
            "feature {feature} outside index of {}",
            index.n_features()
        )));
    }
    if index.n_sequences() > corpus.len() {
        return Err(Error::InvalidArgument(format!(
            "index covers {} sequences but the corpus has {}",
            index.n_sequences(),
            corpus.len()
        )));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("exemplar count must be positive".into()));
    }
    let maxima = index.max_per_sequence(feature);
    let ineligible = |reason: String| Error::Ineligible {
        feature: feature_ref.to_string(),
        reason,
    };
    if maxima.len() < n {
        return Err(ineligible(format!("active in {} sequences, need at least {n}", maxima.len())));
    }
    let inactive: Vec<usize> = (0..index.n_sequences())
        .filter(|s| !maxima.contains_key(s) && corpus[*s].len() >= 2)
        .collect();
    if inactive.len() < n {
        return Err(ineligible(format!(
            "inactive in {} sequences of length ≥ 2, need at least {n}",
            inactive.len()
        )));
    }

    let mut ranked: Vec<(usize, usize, f32)> = maxima.into_iter().map(|(s, (p, a))| (s, p, a)).collect();
    ranked.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    ranked.truncate(n);

    let tree = SeedTree::new(seed);
    let mut rng = tree.child("negatives").rng();
    let picked: Vec<usize> = sample(&mut rng, inactive.len(), n).into_iter().map(|i| inactive[i]).collect();
    let negatives_raw: Vec<(usize, usize)> = picked
        .into_iter()
        .map(|s| (s, rng.random_range(1..corpus[s].len())))
        .collect();

    let splits = |label: &str| -> Vec<Split> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut tree.child(label).rng());
        let mut out = vec![Split::Train; n];
        for (rank, &i) in order.iter().enumerate() {
            out[i] = Split::of_rank(rank, n);
        }
        out
    };
    let pos_split = splits("split-positive");
    let neg_split = splits("split-negative");

    let positives = ranked
        .into_iter()
        .zip(pos_split)
        .map(|((seq, target, activation), split)| Exemplar {
            seq,
            tokens: corpus[seq].ids.clone(),
            target,
            activation,
            split,
        })
        .collect();
    let negatives = negatives_raw
        .into_iter()
        .zip(neg_split)
        .map(|((seq, target), split)| Exemplar {
            seq,
            tokens: corpus[seq].ids.clone(),
            target,
            activation: 0.0,
            split,
        })
        .collect();
    Ok(ExemplarDataset {
        feature: feature_ref,
        positives,
        negatives,
        seed,
    })
}
