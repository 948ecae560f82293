// SPDX-License-Identifier: MIT OR Apache-2.0

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::oracle::oracle_outputs;
use super::{GroundTruth, PlantKind, BOS};
use crate::error::{Error, Result};
use crate::model::TokenSequence;
use crate::numkernel::SeedTree;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusParams {
    pub n_sequences: usize,
    /// Tokens per sequence, BOS included.
    pub length: usize,
    /// Share of sequences that carry planted patterns.
    pub match_fraction: f64,
    /// Distinct plants placed in one matching sequence, as many as fit.
    pub patterns_per_sequence: usize,
    /// Counting patterns repeat their key `1..=max_count` times.
    pub max_count: usize,
    pub seed: u64,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            n_sequences: 2000,
            length: 16,
            match_fraction: 0.8,
            patterns_per_sequence: 3,
            max_count: 5,
            seed: 0,
        }
    }
}

/// Where one plant's tokens landed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlacedPattern {
    pub plant: usize,
    pub key_positions: Vec<usize>,
    pub query_position: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractor_position: Option<usize>,
}

/// Planted patterns of a sequence and the positions the oracle marks active,
/// as `(output feature, position)` pairs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub patterns: Vec<PlacedPattern>,
    pub active: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub sequences: Vec<TokenSequence>,
    pub meta: Vec<SequenceMeta>,
}

/// Token list of one plant occurrence, in order, tagged with its role.
#[derive(Clone, Copy, PartialEq)]
enum Role {
    Key,
    Query,
    Distractor,
}

fn pattern(gt: &GroundTruth, plant: usize, params: &CorpusParams, rng: &mut impl Rng) -> Vec<(usize, Role)> {
    let s = &gt.specs[plant];
    let mut toks = match s.kind {
        PlantKind::Counting => {
            let c = rng.random_range(1..=params.max_count.max(1));
            vec![(s.key, Role::Key); c]
        }
        _ => vec![(s.key, Role::Key)],
    };
    if s.kind == PlantKind::Absence && rng.random_bool(0.5) {
        let at = rng.random_range(0..=toks.len());
        toks.insert(at, (s.distractor.expect("validated absence plant"), Role::Distractor));
    }
    toks.push((s.query, Role::Query));
    toks
}

fn one_sequence(gt: &GroundTruth, params: &CorpusParams, fillers: &[usize], seed: SeedTree) -> Result<(TokenSequence, Vec<PlacedPattern>)> {
    let mut rng = seed.rng();
    let slots = params.length - 1;
    let n_plants = gt.specs.len();
    let mut chosen: Vec<(usize, Vec<(usize, Role)>)> = Vec::new();
    if n_plants > 0 && rng.random_bool(params.match_fraction) {
        let k = params.patterns_per_sequence.min(n_plants);
        let mut used = 0;
        for p in sample(&mut rng, n_plants, k) {
            let toks = pattern(gt, p, params, &mut rng);
            if used + toks.len() <= slots {
                used += toks.len();
                chosen.push((p, toks));
            }
        }
    }
    // Random interleaving that keeps each pattern's internal order.
    let mut order: Vec<usize> = chosen.iter().enumerate().flat_map(|(i, (_, t))| std::iter::repeat_n(i, t.len())).collect();
    order.shuffle(&mut rng);
    let mut positions: Vec<usize> = sample(&mut rng, slots, order.len()).into_iter().map(|p| p + 1).collect();
    positions.sort_unstable();

    let mut ids = vec![usize::MAX; params.length];
    ids[0] = BOS;
    let mut placed: Vec<PlacedPattern> = chosen
        .iter()
        .map(|(p, _)| PlacedPattern {
            plant: *p,
            key_positions: Vec::new(),
            query_position: 0,
            distractor_position: None,
        })
        .collect();
    let mut cursor = vec![0usize; chosen.len()];
    for (&i, &pos) in order.iter().zip(&positions) {
        let (tok, role) = chosen[i].1[cursor[i]];
        cursor[i] += 1;
        ids[pos] = tok;
        match role {
            Role::Key => placed[i].key_positions.push(pos),
            Role::Query => placed[i].query_position = pos,
            Role::Distractor => placed[i].distractor_position = Some(pos),
        }
    }
    for id in ids.iter_mut().filter(|id| **id == usize::MAX) {
        *id = *fillers
            .get(rng.random_range(0..fillers.len().max(1)))
            .ok_or_else(|| Error::InvalidArgument("no filler tokens left in the vocabulary".into()))?;
    }
    placed.sort_by_key(|p| p.plant);
    Ok((TokenSequence::new(ids), placed))
}

/// Seeded corpus over `gt`'s vocabulary. Every sequence starts with BOS;
/// `match_fraction` of them carry up to `patterns_per_sequence` patterns of
/// distinct plants at random positions, the rest is filler. Each sequence
/// uses its own derived seed, so generation parallelizes without changing
/// the output. Labels come from the 64-bit oracle.
pub fn gen_corpus(gt: &GroundTruth, params: &CorpusParams) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&params.match_fraction) {
        return Err(Error::InvalidArgument(format!("match_fraction {} outside [0, 1]", params.match_fraction)));
    }
    if params.length > gt.params.max_len {
        return Err(Error::SequenceTooLong {
            len: params.length,
            max_len: gt.params.max_len,
        });
    }
    let longest_min = gt
        .specs
        .iter()
        .map(|s| if s.kind == PlantKind::Absence { 3 } else { 2 })
        .max()
        .unwrap_or(0);
    if params.length < 1 + longest_min.max(1) {
        return Err(Error::InvalidArgument(format!(
            "length {} cannot fit BOS plus a pattern of {longest_min} tokens",
            params.length
        )));
    }
    let fillers = gt.filler_tokens();
    let root = SeedTree::new(params.seed).child("corpus");
    let out: Vec<(TokenSequence, SequenceMeta)> = (0..params.n_sequences)
        .into_par_iter()
        .map(|i| {
            let (seq, patterns) = one_sequence(gt, params, &fillers, root.index(i as u64))?;
            let acts = oracle_outputs(gt, &seq)?;
            let mut active: Vec<(usize, usize)> = Vec::new();
            for (t, row) in acts.iter().enumerate() {
                for (g, &a) in row.iter().enumerate() {
                    if a > 0.0 {
                        active.push((g, t));
                    }
                }
            }
            active.sort_unstable();
            Ok((seq, SequenceMeta { patterns, active }))
        })
        .collect::<Result<_>>()?;
    let (sequences, meta) = out.into_iter().unzip();
    Ok(Corpus { sequences, meta })
}
