// SPDX-License-Identifier: MIT OR Apache-2.0

//! Rule extraction for a single output feature of an attention head.
//!
//! Argument order is always query first: `A(q, k) = d_qᵀ W_Qᵀ W_K d_k`. The
//! output direction `u` is the output feature's encoder row, so the scores
//! explain `relu(y_tᵀ u)`.

mod detect;
mod gradient;
mod predict;
mod select;

pub use detect::{counting_statistics, detect_counting, detect_distractor, CountingStatistics};
pub use gradient::{importance_gradient, rank_gradient_based, ExampleFeatures};
pub use predict::{predict_active, predict_score, PredictOptions};
pub use select::{rank_weight_based, select_candidates};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::AttentionHead;
use crate::numkernel::{dot64, matvec, matvec_t, TensorF32};
use crate::sae::SaeDictionary;

/// A feature of a named dictionary.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureRef {
    pub sae: String,
    pub index: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl FeatureRef {
    pub fn new(sae: impl Into<String>, index: usize) -> Self {
        Self {
            sae: sae.into(),
            index,
            label: None,
        }
    }

    pub fn with_label(mut self, label: Option<String>) -> Self {
        self.label = label;
        self
    }
}

/// `sae.index`, e.g. `L0H0.17`.
impl std::fmt::Display for FeatureRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.sae, self.index)
    }
}

/// `[key] … [query] → output` with the two scores that support it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkipGramRule {
    pub key: FeatureRef,
    pub query: FeatureRef,
    pub value_score: f32,
    pub attention_score: f32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub importance: Option<f32>,
}

impl SkipGramRule {
    /// Only rules with both scores positive take part in prediction.
    pub fn is_admissible(&self) -> bool {
        self.value_score > 0.0 && self.attention_score > 0.0
    }

    pub fn weight(&self) -> f64 {
        f64::from(self.attention_score) * f64::from(self.value_score)
    }
}

/// A key that out-attends the rule's key for the same query while pushing
/// the output feature down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbsenceAnnotation {
    /// Index of the annotated rule in [`RuleSet::rules`].
    pub rule: usize,
    pub distractor: FeatureRef,
    pub distractor_attention: f32,
    pub distractor_value: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountingHypothesis {
    pub key: FeatureRef,
    pub correlation: f64,
    pub sample_count: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankMethod {
    Weight,
    Gradient,
}

impl std::fmt::Display for RankMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            RankMethod::Weight => "weight",
            RankMethod::Gradient => "gradient",
        })
    }
}

impl std::str::FromStr for RankMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weight" => Ok(RankMethod::Weight),
            "gradient" => Ok(RankMethod::Gradient),
            other => Err(Error::InvalidArgument(format!("unknown ranking method `{other}`"))),
        }
    }
}

/// Disjunction of ranked skip-gram rules describing one output feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuleSet {
    pub output_feature: FeatureRef,
    pub method: RankMethod,
    pub rules: Vec<SkipGramRule>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub absence: Option<AbsenceAnnotation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counting: Option<CountingHypothesis>,
}

impl RuleSet {
    pub fn new(output_feature: FeatureRef, method: RankMethod, rules: Vec<SkipGramRule>) -> Self {
        Self {
            output_feature,
            method,
            rules,
            absence: None,
            counting: None,
        }
    }

    pub fn top(&self) -> Option<&SkipGramRule> {
        self.rules.first()
    }
}

/// Everything the scores of one output feature depend on.
#[derive(Clone, Copy)]
pub struct RuleContext<'a> {
    pub head: &'a AttentionHead,
    pub sae_in: &'a SaeDictionary,
    /// Output direction `u` (length `d_head`).
    pub u: &'a [f32],
    /// Name of the input dictionary, used in [`FeatureRef::sae`].
    pub input_sae: &'a str,
    /// Optional human-readable label per input feature.
    pub labels: Option<&'a [String]>,
}

impl<'a> RuleContext<'a> {
    pub fn new(head: &'a AttentionHead, sae_in: &'a SaeDictionary, u: &'a [f32]) -> Result<Self> {
        if sae_in.dim() != head.d_model() {
            return Err(Error::Dimension(format!(
                "input SAE dim {} vs d_model {}",
                sae_in.dim(),
                head.d_model()
            )));
        }
        if u.len() != head.d_head() {
            return Err(Error::Dimension(format!(
                "output direction has length {}, d_head is {}",
                u.len(),
                head.d_head()
            )));
        }
        Ok(Self {
            head,
            sae_in,
            u,
            input_sae: "in",
            labels: None,
        })
    }

    pub fn with_names(mut self, input_sae: &'a str, labels: Option<&'a [String]>) -> Self {
        self.input_sae = input_sae;
        self.labels = labels;
        self
    }

    pub fn feature_ref(&self, index: usize) -> FeatureRef {
        FeatureRef::new(self.input_sae, index)
            .with_label(self.labels.and_then(|l| l.get(index).cloned()))
    }

    /// `S(j)` for every input feature.
    pub fn value_scores(&self) -> Result<Vec<f32>> {
        let w = matvec_t(self.head.w_v(), self.u)?;
        matvec(self.sae_in.decoder(), &w)
    }

    /// `A(q, key)` for every query feature `q`.
    pub fn attention_scores_to_key(&self, key: usize) -> Result<Vec<f32>> {
        let k = matvec(self.head.w_k(), self.sae_in.decoder_row(key))?;
        let back = matvec_t(self.head.w_q(), &k)?;
        matvec(self.sae_in.decoder(), &back)
    }

    /// `A(query, k)` for every key feature `k`.
    pub fn attention_scores_from_query(&self, query: usize) -> Result<Vec<f32>> {
        let q = matvec(self.head.w_q(), self.sae_in.decoder_row(query))?;
        let back = matvec_t(self.head.w_k(), &q)?;
        matvec(self.sae_in.decoder(), &back)
    }

    pub fn rule(&self, key: usize, query: usize) -> Result<SkipGramRule> {
        let d_k = self.sae_in.decoder_row(key);
        let d_q = self.sae_in.decoder_row(query);
        Ok(SkipGramRule {
            key: self.feature_ref(key),
            query: self.feature_ref(query),
            value_score: value_score(d_k, self.head, self.u)?,
            attention_score: attention_score(d_q, d_k, self.head)?,
            importance: None,
        })
    }
}

/// `S = d_kᵀ W_Vᵀ u`.
pub fn value_score(d_k: &[f32], head: &AttentionHead, u: &[f32]) -> Result<f32> {
    let v = matvec(head.w_v(), d_k)?;
    if u.len() != v.len() {
        return Err(Error::Dimension(format!(
            "output direction has length {}, d_head is {}",
            u.len(),
            v.len()
        )));
    }
    Ok(dot64(&v, u) as f32)
}

/// `A = d_qᵀ W_Qᵀ W_K d_k`, query argument first.
pub fn attention_score(d_q: &[f32], d_k: &[f32], head: &AttentionHead) -> Result<f32> {
    let q = matvec(head.w_q(), d_q)?;
    let k = matvec(head.w_k(), d_k)?;
    Ok(dot64(&q, &k) as f32)
}

/// Labels each input feature with the vocabulary token whose raw embedding
/// activates it most (lowest id on ties).
pub fn token_labels(vocab: &[String], token_embeddings: &TensorF32, sae_in: &SaeDictionary) -> Result<Vec<String>> {
    (0..sae_in.n_features())
        .map(|j| {
            let (best, _) = best_token_for_feature(token_embeddings, sae_in, j)?;
            Ok(vocab.get(best).cloned().unwrap_or_default())
        })
        .collect()
}

/// `argmax_w f_j(e_w)` and its activation; ties go to the lowest token id.
pub fn best_token_for_feature(
    token_embeddings: &TensorF32,
    sae_in: &SaeDictionary,
    feature: usize,
) -> Result<(usize, f32)> {
    let (v, d) = token_embeddings.dims2()?;
    if d != sae_in.dim() {
        return Err(Error::Dimension(format!(
            "embedding width {d} vs input SAE dim {}",
            sae_in.dim()
        )));
    }
    if feature >= sae_in.n_features() {
        return Err(Error::InvalidArgument(format!(
            "feature {feature} outside dictionary of {}",
            sae_in.n_features()
        )));
    }
    let mut best = (0usize, f32::NEG_INFINITY);
    for w in 0..v {
        let a = sae_in.activation(token_embeddings.row(w), feature);
        if a > best.1 {
            best = (w, a);
        }
    }
    Ok(best)
}
