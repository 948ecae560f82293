// SPDX-License-Identifier: MIT OR Apache-2.0

//! Single-head models with planted skip-gram, absence and counting rules.
//!
//! Tokens are one-hot, so every input feature is a token and the input
//! dictionary reconstructs embeddings exactly. `W_Q` is the identity and
//! `W_K` holds the logit table `L[query, key]` directly. Token 0 is a BOS
//! token that sits at position 0 of every generated sequence and acts as an
//! attention sink: every token gives it a base logit, and its value pushes
//! every planted output feature slightly negative. Positions where no rule
//! matches therefore have exactly zero output activation after the ReLU.

mod corpus;
mod oracle;

pub use corpus::{gen_corpus, Corpus, CorpusParams, PlacedPattern, SequenceMeta};
pub use oracle::{oracle_activation, oracle_outputs};

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{AttentionHead, HeadId, ToyModel};
use crate::numkernel::TensorF32;
use crate::sae::SaeDictionary;

pub const BOS: usize = 0;
pub const BOS_WORD: &str = "<bos>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlantKind {
    #[serde(rename = "skipgram")]
    SkipGram,
    Absence,
    Counting,
}

/// One planted rule `[key] … [query] → output`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantSpec {
    pub kind: PlantKind,
    pub key: usize,
    pub query: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractor: Option<usize>,
    /// Output feature index, `0..n_plants`.
    pub output: usize,
    pub logit_gain: f32,
    pub value_gain: f32,
    /// Distractor logit toward the query (absence only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractor_gain: Option<f32>,
    /// Distractor value as a multiple of `value_gain` (absence only).
    #[serde(default = "default_distractor_ratio")]
    pub distractor_value_ratio: f32,
}

fn default_distractor_ratio() -> f32 {
    -0.25
}

impl PlantSpec {
    pub const DEFAULT_LOGIT_GAIN: f32 = 8.0;
    pub const DEFAULT_VALUE_GAIN: f32 = 1.0;

    pub fn skipgram(key: usize, query: usize, output: usize) -> Self {
        Self {
            kind: PlantKind::SkipGram,
            key,
            query,
            distractor: None,
            output,
            logit_gain: Self::DEFAULT_LOGIT_GAIN,
            value_gain: Self::DEFAULT_VALUE_GAIN,
            distractor_gain: None,
            distractor_value_ratio: default_distractor_ratio(),
        }
    }

    /// Absence plant with distractor logit `logit_gain + 2`.
    pub fn absence(key: usize, query: usize, distractor: usize, output: usize) -> Self {
        Self {
            kind: PlantKind::Absence,
            distractor: Some(distractor),
            distractor_gain: Some(Self::DEFAULT_LOGIT_GAIN + 2.0),
            ..Self::skipgram(key, query, output)
        }
    }

    pub fn counting(key: usize, query: usize, output: usize) -> Self {
        Self {
            kind: PlantKind::Counting,
            ..Self::skipgram(key, query, output)
        }
    }

    fn tokens(&self) -> Vec<usize> {
        let mut t = vec![self.key, self.query];
        t.extend(self.distractor);
        t
    }

    fn validate(&self, vocab: usize) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        let toks = self.tokens();
        if let Some(&t) = toks.iter().find(|&&t| t >= vocab) {
            return Err(Error::TokenOutOfRange { id: t, vocab });
        }
        if toks.contains(&BOS) {
            return bad(format!("plant {self:?} uses the BOS token"));
        }
        if toks.iter().collect::<HashSet<_>>().len() != toks.len() {
            return bad(format!("plant tokens must be distinct: {toks:?}"));
        }
        if !(self.logit_gain > 0.0 && self.value_gain > 0.0) {
            return bad(format!("plant gains must be positive: {self:?}"));
        }
        match (self.kind, self.distractor, self.distractor_gain) {
            (PlantKind::Absence, Some(_), Some(g)) if g >= 0.0 && self.distractor_value_ratio <= 0.0 => Ok(()),
            (PlantKind::Absence, ..) => bad(format!(
                "absence plant needs a distractor, a non-negative distractor gain and a non-positive value ratio: {self:?}"
            )),
            (_, None, None) => Ok(()),
            _ => bad(format!("only absence plants carry a distractor: {self:?}")),
        }
    }
}

/// Global construction constants.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthParams {
    pub vocab_size: usize,
    /// At least `vocab_size`; extra dimensions stay unused.
    pub d_model: usize,
    pub max_len: usize,
    /// Logit every token gives the BOS token.
    pub bos_logit: f32,
    /// BOS value is `-bos_value · value_gain` on each planted output feature.
    pub bos_value: f32,
    /// Counting queries give BOS a logit of `logit_gain + ln(sink_weight)`.
    pub sink_weight: f32,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            vocab_size: 64,
            d_model: 64,
            max_len: 64,
            bos_logit: 4.0,
            bos_value: 0.15,
            sink_weight: 4.0,
        }
    }
}

/// A planted model, its exact dictionaries and the specs that built it.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub params: SynthParams,
    pub specs: Vec<PlantSpec>,
    pub model: ToyModel,
    pub head: HeadId,
    pub sae_in: SaeDictionary,
    pub sae_out: SaeDictionary,
}

impl GroundTruth {
    pub fn n_outputs(&self) -> usize {
        self.sae_out.n_features()
    }

    /// Tokens used by no plant (BOS excluded).
    pub fn filler_tokens(&self) -> Vec<usize> {
        let used: HashSet<usize> = self.specs.iter().flat_map(PlantSpec::tokens).collect();
        (1..self.params.vocab_size).filter(|t| !used.contains(t)).collect()
    }

    /// The plant that drives output feature `g`.
    pub fn spec_for_output(&self, g: usize) -> Option<&PlantSpec> {
        self.specs.iter().find(|s| s.output == g)
    }
}

/// Word for each token id: `<bos>`, then `k`/`q`/`d` plus the plant's output
/// index for planted tokens, `f{id}` for fillers.
fn vocabulary(vocab: usize, specs: &[PlantSpec]) -> Vec<String> {
    let mut words: Vec<String> = (0..vocab).map(|i| format!("f{i}")).collect();
    words[BOS] = BOS_WORD.to_string();
    for s in specs {
        words[s.key] = format!("k{}", s.output);
        words[s.query] = format!("q{}", s.output);
        if let Some(d) = s.distractor {
            words[d] = format!("d{}", s.output);
        }
    }
    words
}

/// Builds the planted model for any mix of plant kinds.
///
/// Output features are numbered `0..specs.len()` and each spec must name a
/// distinct one. Two plants sharing a token must agree on its role: a token
/// cannot be a key for one plant's query and its distractor for another.
pub fn plant(params: &SynthParams, specs: &[PlantSpec]) -> Result<GroundTruth> {
    let v = params.vocab_size;
    let d = params.d_model;
    if v < 2 {
        return Err(Error::InvalidArgument("vocabulary needs BOS plus at least one token".into()));
    }
    if d < v {
        return Err(Error::InvalidArgument(format!("d_model {d} is smaller than the vocabulary {v}")));
    }
    if params.max_len == 0 {
        return Err(Error::InvalidArgument("max_len must be positive".into()));
    }
    if !(params.bos_value >= 0.0 && params.sink_weight > 0.0 && params.bos_logit.is_finite()) {
        return Err(Error::InvalidArgument(format!("bad sink parameters: {params:?}")));
    }
    let mut outputs = vec![false; specs.len()];
    let mut pairs = HashSet::new();
    for s in specs {
        s.validate(v)?;
        if s.output >= specs.len() || std::mem::replace(&mut outputs[s.output], true) {
            return Err(Error::ConflictingSpecs(format!(
                "output features must be a permutation of 0..{}; got {} twice or out of range",
                specs.len(),
                s.output
            )));
        }
        if !pairs.insert((s.query, s.output)) {
            return Err(Error::ConflictingSpecs(format!("query {} already drives output {}", s.query, s.output)));
        }
    }

    let mut logits = TensorF32::zeros(vec![d, d]);
    for w in 0..v {
        logits.set2(w, BOS, params.bos_logit);
    }
    let mut w_v = TensorF32::zeros(vec![d, d]);
    let set_once = |m: &mut TensorF32, r: usize, c: usize, val: f32, what: &str| -> Result<()> {
        let old = m.get2(r, c);
        if old != 0.0 && old != val && !(what == "logit" && c == BOS) {
            return Err(Error::ConflictingSpecs(format!("{what} ({r}, {c}) set to both {old} and {val}")));
        }
        m.set2(r, c, val);
        Ok(())
    };
    for s in specs {
        let g = s.output;
        set_once(&mut logits, s.query, s.key, s.logit_gain, "logit")?;
        set_once(&mut w_v, g, s.key, s.value_gain, "value")?;
        w_v.set2(g, BOS, -params.bos_value * s.value_gain);
        if s.kind == PlantKind::Counting {
            set_once(&mut logits, s.query, BOS, s.logit_gain + params.sink_weight.ln(), "logit")?;
        }
        if let (Some(dt), Some(dg)) = (s.distractor, s.distractor_gain) {
            set_once(&mut logits, s.query, dt, dg, "logit")?;
            set_once(&mut w_v, g, dt, s.distractor_value_ratio * s.value_gain, "value")?;
        }
    }

    let mut emb = TensorF32::zeros(vec![v, d]);
    for w in 0..v {
        emb.set2(w, w, 1.0);
    }
    let head = AttentionHead::new(TensorF32::identity(d), logits, w_v)?;
    let id = HeadId { layer: 0, head: 0 };
    let model = ToyModel::new(
        vocabulary(v, specs),
        emb.clone(),
        TensorF32::zeros(vec![params.max_len, d]),
        vec![(id, head)],
        Some(BOS),
    )?;
    let sae_in = SaeDictionary::tied(emb)?;
    let mut out_atoms = TensorF32::zeros(vec![specs.len(), d]);
    for g in 0..specs.len() {
        out_atoms.set2(g, g, 1.0);
    }
    let sae_out = SaeDictionary::tied(out_atoms)?;
    Ok(GroundTruth {
        params: params.clone(),
        specs: specs.to_vec(),
        model,
        head: id,
        sae_in,
        sae_out,
    })
}

fn plant_kind(params: &SynthParams, specs: &[PlantSpec], kind: PlantKind) -> Result<GroundTruth> {
    if let Some(s) = specs.iter().find(|s| s.kind != kind) {
        return Err(Error::InvalidArgument(format!("expected only {kind:?} plants, got {s:?}")));
    }
    plant(params, specs)
}

pub fn plant_skipgram(params: &SynthParams, specs: &[PlantSpec]) -> Result<GroundTruth> {
    plant_kind(params, specs, PlantKind::SkipGram)
}

pub fn plant_absence(params: &SynthParams, specs: &[PlantSpec]) -> Result<GroundTruth> {
    plant_kind(params, specs, PlantKind::Absence)
}

pub fn plant_counting(params: &SynthParams, specs: &[PlantSpec]) -> Result<GroundTruth> {
    plant_kind(params, specs, PlantKind::Counting)
}

/// Allocates tokens `1, 2, …` to `skipgram` skip-gram, `absence` absence and
/// `counting` counting plants, in that order, with default gains. Output
/// feature `g` is the `g`-th plant.
pub fn standard_specs(skipgram: usize, absence: usize, counting: usize) -> Vec<PlantSpec> {
    let mut next = 1;
    let mut take = || {
        next += 1;
        next - 1
    };
    let mut specs = Vec::new();
    for _ in 0..skipgram {
        let (k, q) = (take(), take());
        specs.push(PlantSpec::skipgram(k, q, specs.len()));
    }
    for _ in 0..absence {
        let (k, q, d) = (take(), take(), take());
        specs.push(PlantSpec::absence(k, q, d, specs.len()));
    }
    for _ in 0..counting {
        let (k, q) = (take(), take());
        specs.push(PlantSpec::counting(k, q, specs.len()));
    }
    specs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TokenSequence;

    fn params(v: usize) -> SynthParams {
        SynthParams {
            vocab_size: v,
            d_model: v,
            max_len: 32,
            ..SynthParams::default()
        }
    }

    fn act(gt: &GroundTruth, ids: &[usize], t: usize, g: usize) -> f64 {
        oracle_activation(gt, &TokenSequence::new(ids.to_vec()), t, g).unwrap()
    }

    #[test]
    fn single_skipgram_fires_only_after_its_key() {
        // Tokens: 1 = A (key), 2 = B (query), 3 = X (filler).
        let gt = plant_skipgram(&params(8), &[PlantSpec::skipgram(1, 2, 0)]).unwrap();
        assert!(act(&gt, &[BOS, 1, 3, 2], 3, 0) > 0.9);
        assert_eq!(act(&gt, &[BOS, 3, 3, 2], 3, 0), 0.0);
        for t in 0..3 {
            assert_eq!(act(&gt, &[BOS, 1, 3, 2], t, 0), 0.0);
        }
    }

    #[test]
    fn no_specs_means_no_outputs() {
        let gt = plant_skipgram(&params(4), &[]).unwrap();
        assert_eq!(gt.n_outputs(), 0);
        assert_eq!(gt.filler_tokens(), vec![1, 2, 3]);
    }

    #[test]
    fn input_dictionary_is_exact() {
        let gt = plant(&params(10), &standard_specs(1, 1, 1)).unwrap();
        let seq = TokenSequence::new(vec![BOS, 1, 2, 3, 4, 5, 9]);
        let x = gt.model.embed(&seq).unwrap();
        for i in 0..seq.len() {
            let f = gt.sae_in.encode(x.row(i)).unwrap();
            assert_eq!(gt.sae_in.decode(&f).unwrap(), x.row(i));
        }
    }

    #[test]
    fn absence_distractor_lowers_activation() {
        let gt = plant_absence(&params(8), &[PlantSpec::absence(1, 2, 3, 0)]).unwrap();
        let clean = act(&gt, &[BOS, 1, 4, 2], 3, 0);
        let dirty = act(&gt, &[BOS, 3, 1, 4, 2], 4, 0);
        assert!(clean > 0.9);
        assert!(dirty < clean);
    }

    #[test]
    fn zero_gain_distractor_behaves_like_a_skipgram() {
        let mut spec = PlantSpec::absence(1, 2, 3, 0);
        spec.distractor_gain = Some(0.0);
        let gt = plant_absence(&params(8), &[spec]).unwrap();
        let sg = plant_skipgram(&params(8), &[PlantSpec::skipgram(1, 2, 0)]).unwrap();
        for ids in [[BOS, 1, 3, 2], [BOS, 3, 4, 2], [BOS, 3, 1, 2]] {
            assert_eq!(act(&gt, &ids, 3, 0) > 0.0, act(&sg, &ids, 3, 0) > 0.0, "{ids:?}");
        }
    }

    #[test]
    fn counting_is_increasing_and_zero_without_keys() {
        let gt = plant_counting(&params(8), &[PlantSpec::counting(1, 2, 0)]).unwrap();
        assert_eq!(act(&gt, &[BOS, 3, 3, 2], 3, 0), 0.0);
        let mut last = 0.0;
        for c in 1..=8 {
            let mut ids = vec![BOS];
            ids.extend(std::iter::repeat_n(1, c));
            ids.push(2);
            let a = act(&gt, &ids, c + 1, 0);
            assert!(a > last, "count {c}: {a} after {last}");
            // Closed form: (c − β s) / (c + s + e^{bos − G − ln s} · s), here with no fillers.
            let g = f64::from(PlantSpec::DEFAULT_LOGIT_GAIN);
            let s = 4.0f64;
            let want = (c as f64 - 0.15 * s) / (c as f64 + s + (-g).exp());
            assert!((a - want).abs() < 1e-5, "count {c}: {a} vs {want}");
            last = a;
        }
    }

    #[test]
    fn conflicting_specs_are_rejected() {
        let p = params(8);
        let err = plant(&p, &[PlantSpec::skipgram(1, 2, 0), PlantSpec::skipgram(3, 2, 0)]).unwrap_err();
        assert!(matches!(err, Error::ConflictingSpecs(_)));
        assert!(plant(&p, &[PlantSpec::skipgram(1, 1, 0)]).is_err());
        assert!(plant(&p, &[PlantSpec::skipgram(0, 1, 0)]).is_err());
        assert!(plant(&p, &[PlantSpec::skipgram(1, 9, 0)]).is_err());
        let mut neg = PlantSpec::skipgram(1, 2, 0);
        neg.logit_gain = 0.0;
        assert!(plant(&p, &[neg]).is_err());
        assert!(plant_counting(&p, &[PlantSpec::skipgram(1, 2, 0)]).is_err());
        // Same key and query for two outputs asks W_K for one logit twice: fine when equal.
        assert!(plant(&p, &[PlantSpec::skipgram(1, 2, 0), PlantSpec::skipgram(1, 2, 1)]).is_ok());
    }

    #[test]
    fn standard_specs_allocate_distinct_tokens() {
        let specs = standard_specs(20, 0, 0);
        let gt = plant(&SynthParams::default(), &specs).unwrap();
        assert_eq!(gt.n_outputs(), 20);
        assert_eq!(gt.filler_tokens().len(), 63 - 40);
        assert_eq!(gt.model.token(specs[3].key), Some("k3"));
        let mixed = standard_specs(2, 2, 2);
        assert_eq!(mixed.iter().map(|s| s.tokens().len()).sum::<usize>(), 14);
    }
}
