// SPDX-License-Identifier: MIT OR Apache-2.0

//! Run configuration: one TOML document plus `--section.key value` overrides.

use std::path::{Path, PathBuf};

use attnrules_core::eval::Split;
use attnrules_core::model::HeadId;
use attnrules_core::numkernel::SeedTree;
use attnrules_core::rules::RankMethod;
use attnrules_core::sae::TrainConfig;
use attnrules_core::synth::{standard_specs, CorpusParams, PlantSpec, SynthParams};
use serde::{Deserialize, Serialize};

use crate::error::{PipelineError, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub run: RunSection,
    pub model: ModelSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSection>,
    pub corpus: CorpusSection,
    pub sae: SaeSection,
    pub extract: ExtractSection,
    pub eval: EvalSection,
    pub intervene: InterveneSection,
    pub serve: ServeSection,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Where the run lives. Not echoed into the manifest, so the same
    /// configuration gives the same manifest wherever it runs.
    #[serde(skip_serializing)]
    pub dir: PathBuf,
    pub seed: u64,
    /// Head whose output features are explained, e.g. `L0H0`.
    pub head: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("run"),
            seed: 0,
            head: "L0H0".into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Existing model (ATRW plus `.meta.json`) to analyse instead of a planted one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

/// Planted-model recipe. Either counts per kind, which allocate tokens from
/// 1 upwards, or an explicit `plants` list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSection {
    pub vocab_size: usize,
    pub d_model: usize,
    pub max_len: usize,
    pub bos_logit: f32,
    pub bos_value: f32,
    pub sink_weight: f32,
    pub skipgram: usize,
    pub absence: usize,
    pub counting: usize,
    pub logit_gain: f32,
    pub value_gain: f32,
    /// Defaults to `logit_gain + 2`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub distractor_gain: Option<f32>,
    pub distractor_value_ratio: f32,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub plants: Vec<PlantSpec>,
}

impl Default for SynthSection {
    fn default() -> Self {
        let p = SynthParams::default();
        Self {
            vocab_size: p.vocab_size,
            d_model: p.d_model,
            max_len: p.max_len,
            bos_logit: p.bos_logit,
            bos_value: p.bos_value,
            sink_weight: p.sink_weight,
            skipgram: 0,
            absence: 0,
            counting: 0,
            logit_gain: PlantSpec::DEFAULT_LOGIT_GAIN,
            value_gain: PlantSpec::DEFAULT_VALUE_GAIN,
            distractor_gain: None,
            distractor_value_ratio: -0.25,
            plants: Vec::new(),
        }
    }
}

impl SynthSection {
    pub fn params(&self) -> SynthParams {
        SynthParams {
            vocab_size: self.vocab_size,
            d_model: self.d_model,
            max_len: self.max_len,
            bos_logit: self.bos_logit,
            bos_value: self.bos_value,
            sink_weight: self.sink_weight,
        }
    }

    pub fn specs(&self) -> Result<Vec<PlantSpec>> {
        if !self.plants.is_empty() {
            if self.skipgram + self.absence + self.counting > 0 {
                return Err(PipelineError::Config(
                    "synth: give either plant counts or an explicit plants list, not both".into(),
                ));
            }
            return Ok(self.plants.clone());
        }
        let mut specs = standard_specs(self.skipgram, self.absence, self.counting);
        for s in &mut specs {
            s.logit_gain = self.logit_gain;
            s.value_gain = self.value_gain;
            if s.distractor.is_some() {
                s.distractor_gain = Some(self.distractor_gain.unwrap_or(self.logit_gain + 2.0));
                s.distractor_value_ratio = self.distractor_value_ratio;
            }
        }
        Ok(specs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    /// Whitespace-tokenized text, one sequence per line.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    pub n_sequences: usize,
    pub length: usize,
    pub match_fraction: f64,
    pub patterns_per_sequence: usize,
    pub max_count: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let p = CorpusParams::default();
        Self {
            path: None,
            n_sequences: p.n_sequences,
            length: p.length,
            match_fraction: p.match_fraction,
            patterns_per_sequence: p.patterns_per_sequence,
            max_count: p.max_count,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SaeSource {
    /// Exact dictionaries written by `synth`.
    Planted,
    /// Trained by `train-sae` on the corpus.
    Train,
    /// Copied by `train-sae` from `in_path` and `out_path`.
    Paths,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeSection {
    pub source: SaeSource,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub in_path: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_path: Option<PathBuf>,
    pub n_features_in: usize,
    pub n_features_out: usize,
    pub l1_coefficient: f64,
    pub batch_size: usize,
    pub lr: f32,
    pub steps: u64,
    pub resample_checkpoints: Vec<u64>,
    pub dead_window: u64,
    /// Sequences whose embeddings form the training pool.
    pub max_seqs: usize,
    /// Steps between trainer checkpoints; 0 disables them.
    pub checkpoint_every: u64,
    /// Continue from `checkpoints/` when present.
    pub resume: bool,
}

impl Default for SaeSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            source: SaeSource::Planted,
            in_path: None,
            out_path: None,
            n_features_in: 256,
            n_features_out: 256,
            l1_coefficient: t.l1_coefficient,
            batch_size: t.batch_size,
            lr: t.lr,
            steps: t.steps,
            resample_checkpoints: t.resample_checkpoints,
            dead_window: t.dead_window,
            max_seqs: 50_000,
            checkpoint_every: 0,
            resume: false,
        }
    }
}

impl SaeSection {
    pub fn train_config(&self, n_features: usize, seed: u64) -> TrainConfig {
        TrainConfig {
            n_features,
            l1_coefficient: self.l1_coefficient,
            batch_size: self.batch_size,
            lr: self.lr,
            steps: self.steps,
            resample_checkpoints: self.resample_checkpoints.clone(),
            dead_window: self.dead_window,
            seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExtractSection {
    pub k_keys: usize,
    pub k_queries: usize,
    pub method: RankMethod,
    /// Rules kept per feature after ranking.
    pub max_rules: usize,
    pub absence: bool,
    pub counting: bool,
    pub counting_threshold: f64,
    pub counting_min_spread: usize,
    /// Active sequences sampled uniformly for the counting correlation.
    pub counting_sample: usize,
    /// Build exemplar datasets here; otherwise reuse `datasets/`.
    pub build_datasets: bool,
    /// Sequences covered by the activation index.
    pub max_seqs: usize,
    /// Exemplars per class.
    pub n_exemplars: usize,
}

impl Default for ExtractSection {
    fn default() -> Self {
        Self {
            k_keys: 100,
            k_queries: 100,
            method: RankMethod::Weight,
            max_rules: 100,
            absence: true,
            counting: true,
            counting_threshold: 0.5,
            counting_min_spread: 3,
            counting_sample: 300,
            build_datasets: true,
            max_seqs: 50_000,
            n_exemplars: 150,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub split: Split,
    pub top_n: Vec<usize>,
    pub absence_aware: bool,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            top_n: vec![1, 2, 3, 5, 10],
            absence_aware: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterveneSection {
    /// Output feature id such as `L0H0.3`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feature: Option<String>,
    /// Token to prepend; defaults to the token of the detected distractor.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
    pub max_repeats: usize,
    pub sample: usize,
}

impl Default for InterveneSection {
    fn default() -> Self {
        Self {
            feature: None,
            token: None,
            max_repeats: 4,
            sample: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub bind: String,
    pub port: u16,
    /// Default exemplar sample for interventions.
    pub sample: usize,
    /// Built UI assets served under `/`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub static_dir: Option<PathBuf>,
}

impl Default for ServeSection {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1".into(),
            port: 8080,
            sample: 10,
            static_dir: None,
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `overrides` and validates.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let cfg = Self::load_unvalidated(path, overrides)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load_unvalidated(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| PipelineError::Config(format!("cannot read {}: {e}", p.display())))?;
                text.parse::<toml::Table>()
                    .map_err(|e| PipelineError::Config(format!("{}: {e}", p.display())))?
            }
            None => toml::Table::new(),
        };
        apply_overrides(&mut table, overrides)?;
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| PipelineError::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(PipelineError::Config(m.to_string()));
        match (&self.model.path, &self.synth) {
            (Some(_), Some(_)) => return bad("set either model.path or a [synth] section, not both"),
            (None, None) => return bad("set model.path or a [synth] section"),
            _ => {}
        }
        if self.eval.top_n.is_empty() || self.eval.top_n.contains(&0) {
            return bad("eval.top_n must list positive values");
        }
        if self.eval.top_n.windows(2).any(|w| w[0] >= w[1]) {
            return bad("eval.top_n must be strictly ascending");
        }
        if self.eval.top_n.last().is_some_and(|&n| n > self.extract.max_rules) {
            return bad("eval.top_n exceeds extract.max_rules");
        }
        if self.extract.k_keys == 0 || self.extract.k_queries == 0 {
            return bad("extract.k_keys and extract.k_queries must be positive");
        }
        if self.sae.source == SaeSource::Planted && self.synth.is_none() {
            return bad("sae.source = \"planted\" needs a [synth] section");
        }
        if self.sae.source == SaeSource::Paths && (self.sae.in_path.is_none() || self.sae.out_path.is_none()) {
            return bad("sae.source = \"paths\" needs sae.in_path and sae.out_path");
        }
        self.head()?;
        Ok(())
    }

    pub fn head(&self) -> Result<HeadId> {
        parse_head(&self.run.head)
            .ok_or_else(|| PipelineError::Config(format!("run.head `{}` is not of the form L<layer>H<head>", self.run.head)))
    }

    pub fn seeds(&self) -> SeedTree {
        SeedTree::new(self.run.seed)
    }

    pub fn corpus_params(&self) -> CorpusParams {
        CorpusParams {
            n_sequences: self.corpus.n_sequences,
            length: self.corpus.length,
            match_fraction: self.corpus.match_fraction,
            patterns_per_sequence: self.corpus.patterns_per_sequence,
            max_count: self.corpus.max_count,
            seed: self.seeds().child("corpus").root(),
        }
    }
}

pub fn parse_head(s: &str) -> Option<HeadId> {
    let rest = s.strip_prefix('L')?;
    let (layer, head) = rest.split_once('H')?;
    Some(HeadId {
        layer: layer.parse().ok()?,
        head: head.parse().ok()?,
    })
}

/// Applies `--a.b value` pairs. Values parse as TOML literals when they can
/// (`3`, `true`, `[1, 2]`, `"x"`) and fall back to bare strings.
pub fn apply_overrides(table: &mut toml::Table, overrides: &[String]) -> Result<()> {
    let mut it = overrides.iter();
    while let Some(flag) = it.next() {
        let (key, inline) = match flag.strip_prefix("--") {
            Some(k) => match k.split_once('=') {
                Some((k, v)) => (k, Some(v.to_string())),
                None => (k, None),
            },
            None => return Err(PipelineError::Config(format!("unexpected argument `{flag}`"))),
        };
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .cloned()
                .ok_or_else(|| PipelineError::Config(format!("override `{flag}` has no value")))?,
        };
        let path: Vec<&str> = key.split('.').collect();
        if path.len() < 2 || path.iter().any(|p| p.is_empty()) {
            return Err(PipelineError::Config(format!("override `{flag}` must look like --section.key")));
        }
        let parsed = format!("v = {value}")
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or(toml::Value::String(value));
        let mut cur = &mut *table;
        for part in &path[..path.len() - 1] {
            let entry = cur
                .entry(part.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()));
            cur = entry
                .as_table_mut()
                .ok_or_else(|| PipelineError::Config(format!("override `{flag}`: `{part}` is not a section")))?;
        }
        cur.insert(path[path.len() - 1].to_string(), parsed);
    }
    Ok(())
}
