// SPDX-License-Identifier: MIT OR Apache-2.0

//! The pipeline stages. Each stage takes the run lock, archives the outputs
//! it is about to replace, writes its artifacts and refreshes the manifest.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use attnrules_core::eval::{
    aggregate_report, evaluate_ruleset, input_features, intervene_series, pick_distractor_token,
    write_aggregate_csv, write_feature_csv, write_intervention_csv, ExemplarDataset, FeatureMetricsRow, Grouping,
    InterventionRow, Split,
};
use attnrules_core::model::{meta_path, HeadId, TokenSequence, ToyModel};
use attnrules_core::numkernel::{SeedTree, TensorF32};
use attnrules_core::rules::{
    detect_counting, detect_distractor, rank_gradient_based, rank_weight_based, select_candidates, token_labels,
    ExampleFeatures, FeatureRef, PredictOptions, RankMethod, RuleContext, RuleSet,
};
use attnrules_core::sae::{
    collect_activations, ActivationIndex, ActivationStream, EmbeddingStream, IndexSummary, PoolStream, SaeDictionary, SaeTrainer,
    TrainRecord, TrainerCheckpoint,
};
use attnrules_core::synth::{gen_corpus, plant, PlantSpec, SequenceMeta, SynthParams};
use rand::seq::index::sample;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{RunConfig, SaeSource};
use crate::error::{PipelineError, Result};
use crate::rundir::{self, archive, feature_file, write_manifest, RunLock};

/// Everything `plants.json` records about a planted run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantsFile {
    pub params: SynthParams,
    pub head: HeadId,
    pub specs: Vec<PlantSpec>,
    /// Planted patterns and oracle-active positions per corpus sequence.
    pub sequences: Vec<SequenceMeta>,
}

fn missing(what: &str, path: &Path) -> PipelineError {
    PipelineError::Dependency(format!("{what} not found at {}", path.display()))
}

pub fn load_model(dir: &Path) -> Result<ToyModel> {
    let p = dir.join(rundir::MODEL);
    if !p.exists() {
        return Err(missing("model", &p));
    }
    Ok(ToyModel::load(&p)?)
}

pub fn load_sae(dir: &Path, name: &str) -> Result<SaeDictionary> {
    let p = dir.join(name);
    if !p.exists() {
        return Err(missing("dictionary", &p));
    }
    Ok(SaeDictionary::load(&p)?)
}

pub fn load_corpus(dir: &Path, model: &ToyModel) -> Result<Vec<TokenSequence>> {
    let p = dir.join(rundir::CORPUS);
    let text = fs::read_to_string(&p).map_err(|_| missing("corpus", &p))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(model.tokenize(l)?))
        .collect()
}

fn write_corpus(path: &Path, model: &ToyModel, corpus: &[TokenSequence]) -> Result<()> {
    let mut text = String::new();
    for s in corpus {
        text.push_str(&model.detokenize(s)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// `L0H0.7` → 7 after checking the head and the dictionary size.
pub fn parse_feature_id(id: &str, head: HeadId, n_features: usize) -> Option<usize> {
    let (h, idx) = id.rsplit_once('.')?;
    if h != head.to_string() {
        return None;
    }
    let idx: usize = idx.parse().ok()?;
    (idx < n_features).then_some(idx)
}

pub fn output_ref(head: HeadId, index: usize) -> FeatureRef {
    FeatureRef::new(head.to_string(), index)
}

/// Writes the planted model, its exact dictionaries, the corpus and
/// `plants.json`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<PlantsFile> {
    let synth = cfg
        .synth
        .as_ref()
        .ok_or_else(|| PipelineError::Config("synth needs a [synth] section".into()))?;
    let head = cfg.head()?;
    let params = synth.params();
    let specs = synth.specs()?;
    let gt = plant(&params, &specs).map_err(|e| PipelineError::Config(e.to_string()))?;
    if gt.head != head {
        return Err(PipelineError::Config(format!("planted models have a single head {}, run.head is {head}", gt.head)));
    }
    let corpus = gen_corpus(&gt, &cfg.corpus_params()).map_err(|e| PipelineError::Config(e.to_string()))?;

    let dir = &cfg.run.dir;
    let _lock = RunLock::acquire(dir)?;
    let model_meta = format!("{}.meta.json", rundir::MODEL);
    archive(
        dir,
        "synth",
        &[rundir::MODEL, &model_meta, rundir::SAE_IN, rundir::SAE_OUT, rundir::PLANTS, rundir::CORPUS],
    )?;
    gt.model.save(&dir.join(rundir::MODEL))?;
    gt.sae_in.save(&dir.join(rundir::SAE_IN))?;
    gt.sae_out.save(&dir.join(rundir::SAE_OUT))?;
    write_corpus(&dir.join(rundir::CORPUS), &gt.model, &corpus.sequences)?;
    let plants = PlantsFile {
        params,
        head: gt.head,
        specs,
        sequences: corpus.meta,
    };
    write_json(&dir.join(rundir::PLANTS), &plants)?;
    write_manifest(dir, cfg, "synth")?;
    log::info!(
        "planted {} rules; corpus of {} sequences in {}",
        plants.specs.len(),
        corpus.sequences.len(),
        dir.display()
    );
    Ok(plants)
}

/// Brings an external model and corpus into the run when it has none yet.
fn import_inputs(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let model = dir.join(rundir::MODEL);
    if !model.exists() {
        let src = cfg
            .model
            .path
            .as_ref()
            .ok_or_else(|| missing("model", &model))?;
        fs::copy(src, &model).map_err(|e| PipelineError::Config(format!("cannot copy {}: {e}", src.display())))?;
        fs::copy(meta_path(src), meta_path(&model))
            .map_err(|e| PipelineError::Config(format!("cannot copy metadata of {}: {e}", src.display())))?;
    }
    let corpus = dir.join(rundir::CORPUS);
    if !corpus.exists() {
        let src = cfg
            .corpus
            .path
            .as_ref()
            .ok_or_else(|| PipelineError::Config("no corpus: run synth or set corpus.path".into()))?;
        fs::copy(src, &corpus).map_err(|e| PipelineError::Config(format!("cannot read corpus {}: {e}", src.display())))?;
    }
    Ok(())
}

/// Rows `[positions × width]` of one embedding stream over the corpus.
fn embedding_pool(model: &ToyModel, head: HeadId, stream: EmbeddingStream, corpus: &[TokenSequence]) -> Result<TensorF32> {
    let h = model.head(head)?;
    let width = match stream {
        EmbeddingStream::Input => h.d_model(),
        EmbeddingStream::Output => h.d_head(),
    };
    let rows: Vec<Vec<f32>> = corpus
        .par_iter()
        .map(|seq| -> Result<Vec<f32>> {
            let x = model.embed(seq)?;
            Ok(match stream {
                EmbeddingStream::Input => x.into_data(),
                EmbeddingStream::Output => h.forward(&x)?.0.into_data(),
            })
        })
        .collect::<Result<_>>()?;
    let data: Vec<f32> = rows.into_iter().flatten().collect();
    let n = data.len() / width.max(1);
    Ok(TensorF32::new(vec![n, width], data)?)
}

fn write_history_csv(path: &Path, history: &[TrainRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| PipelineError::Io(e.into()))?;
    for r in history {
        w.serialize(r).map_err(|e| PipelineError::Io(e.into()))?;
    }
    w.flush()?;
    Ok(())
}

fn train_one(cfg: &RunConfig, dir: &Path, label: &str, n_features: usize, pool: TensorF32) -> Result<SaeDictionary> {
    let seeds = cfg.seeds().child(label);
    let config = cfg.sae.train_config(n_features, seeds.root());
    let stream = PoolStream::new(pool, seeds.child("stream"))?;
    let cp_path = dir.join(rundir::CHECKPOINTS).join(format!("{label}.json"));
    let mut trainer = if cfg.sae.resume && cp_path.exists() {
        let mut cp: TrainerCheckpoint = read_json(&cp_path)?;
        let mut same = cp.config.clone();
        same.steps = config.steps;
        if same != config {
            return Err(PipelineError::Config(format!(
                "checkpoint {} was written with different training settings",
                cp_path.display()
            )));
        }
        cp.config = config.clone();
        log::info!("{label}: resuming at step {}", cp.step);
        SaeTrainer::from_checkpoint(cp)?
    } else {
        let init = SaeDictionary::random(n_features, stream.dim(), SeedTree::new(config.seed).child("init"));
        SaeTrainer::new(config.clone(), init)
    };
    let every = cfg.sae.checkpoint_every;
    while trainer.step_count() < config.steps {
        let next = trainer
            .step_count()
            .checked_div(every)
            .map_or(config.steps, |n| ((n + 1) * every).min(config.steps));
        trainer.run_until(&stream, next)?;
        if every > 0 {
            write_json(&cp_path, &trainer.checkpoint())?;
        }
    }
    if let Some(last) = trainer.history().last() {
        log::info!("{label}: step {} mse {:.4e} dead {}", last.step, last.mse, last.dead);
    }
    let (sae, history) = trainer.into_parts();
    write_history_csv(&dir.join(rundir::REPORTS).join(format!("train_{label}.csv")), &history)?;
    Ok(sae)
}

/// Trains (or copies in) the input and output dictionaries.
pub fn cmd_train_sae(cfg: &RunConfig) -> Result<()> {
    let dir = &cfg.run.dir;
    let _lock = RunLock::acquire(dir)?;
    import_inputs(cfg, dir)?;
    let train_in = format!("{}/train_sae_in.csv", rundir::REPORTS);
    let train_out = format!("{}/train_sae_out.csv", rundir::REPORTS);
    match cfg.sae.source {
        SaeSource::Planted => {
            return Err(PipelineError::Config(
                "sae.source is \"planted\": the exact dictionaries come from synth, nothing to train".into(),
            ))
        }
        SaeSource::Paths => {
            archive(dir, "train-sae", &[rundir::SAE_IN, rundir::SAE_OUT])?;
            for (src, name) in [(&cfg.sae.in_path, rundir::SAE_IN), (&cfg.sae.out_path, rundir::SAE_OUT)] {
                let src = src.as_ref().expect("validated");
                SaeDictionary::load(src).map_err(|e| PipelineError::Config(format!("{}: {e}", src.display())))?;
                fs::copy(src, dir.join(name))?;
            }
        }
        SaeSource::Train => {
            let model = load_model(dir)?;
            let corpus = load_corpus(dir, &model)?;
            let head = cfg.head()?;
            let seqs = &corpus[..corpus.len().min(cfg.sae.max_seqs)];
            archive(dir, "train-sae", &[rundir::SAE_IN, rundir::SAE_OUT, &train_in, &train_out])?;
            fs::create_dir_all(dir.join(rundir::REPORTS))?;
            let pool_in = embedding_pool(&model, head, EmbeddingStream::Input, seqs)?;
            let sae_in = train_one(cfg, dir, "sae_in", cfg.sae.n_features_in, pool_in)?;
            sae_in.save(&dir.join(rundir::SAE_IN))?;
            let pool_out = embedding_pool(&model, head, EmbeddingStream::Output, seqs)?;
            let sae_out = train_one(cfg, dir, "sae_out", cfg.sae.n_features_out, pool_out)?;
            sae_out.save(&dir.join(rundir::SAE_OUT))?;
        }
    }
    write_manifest(dir, cfg, "train-sae")?;
    Ok(())
}

/// Outcome of `extract` for one run.
#[derive(Clone, Debug, Default)]
pub struct ExtractSummary {
    pub rulesets: Vec<RuleSet>,
    /// Features skipped for lack of exemplars, with the reason.
    pub ineligible: Vec<(usize, String)>,
}

fn features_of(model: &ToyModel, sae_in: &SaeDictionary, tokens: &[usize]) -> Result<TensorF32> {
    Ok(input_features(model, sae_in, &TokenSequence::new(tokens.to_vec()))?)
}

/// Up to `n` sequences drawn uniformly from those where `feature` fires.
fn counting_exemplars(
    model: &ToyModel,
    sae_in: &SaeDictionary,
    index: &ActivationIndex,
    corpus: &[TokenSequence],
    feature: usize,
    n: usize,
    seed: SeedTree,
) -> Result<Vec<(usize, TensorF32)>> {
    let active: Vec<usize> = index.max_per_sequence(feature).into_keys().collect();
    let mut picked: Vec<usize> = sample(&mut seed.rng(), active.len(), n.min(active.len()))
        .into_iter()
        .map(|i| active[i])
        .collect();
    picked.sort_unstable();
    picked
        .into_iter()
        .map(|s| Ok((s, features_of(model, sae_in, &corpus[s].ids)?)))
        .collect()
}

/// Builds the activation index and exemplar datasets, then extracts,
/// ranks and annotates the rules of every eligible output feature.
pub fn cmd_extract(cfg: &RunConfig) -> Result<ExtractSummary> {
    let dir = &cfg.run.dir;
    let ex = &cfg.extract;
    let _lock = RunLock::acquire(dir)?;
    let model = load_model(dir)?;
    let sae_in = load_sae(dir, rundir::SAE_IN)?;
    let sae_out = load_sae(dir, rundir::SAE_OUT)?;
    let corpus = load_corpus(dir, &model)?;
    let head = cfg.head()?;
    let attn = model.head(head).map_err(|e| PipelineError::Config(e.to_string()))?;
    let n_out = sae_out.n_features();

    let datasets_dir = dir.join(rundir::DATASETS);
    if !ex.build_datasets && ex.method == RankMethod::Gradient && !datasets_dir.is_dir() {
        return Err(PipelineError::Dependency(format!(
            "gradient ranking needs exemplar datasets in {}; enable extract.build_datasets",
            datasets_dir.display()
        )));
    }

    let index = collect_activations(&model, head, EmbeddingStream::Output, &sae_out, &corpus, ex.max_seqs)?;
    let mut outputs = vec![rundir::INDEX, rundir::INDEX_SUMMARY, rundir::RULES];
    if ex.build_datasets {
        outputs.push(rundir::DATASETS);
    }
    archive(dir, "extract", &outputs)?;
    index.write_jsonl(&dir.join(rundir::INDEX))?;
    write_json(&dir.join(rundir::INDEX_SUMMARY), &index.summary())?;

    let mut summary = ExtractSummary::default();
    let mut datasets: BTreeMap<usize, ExemplarDataset> = BTreeMap::new();
    for j in 0..n_out {
        let fref = output_ref(head, j);
        let path = dir.join(feature_file(rundir::DATASETS, &fref.to_string()));
        if ex.build_datasets {
            let seed = cfg.seeds().child("datasets").index(j as u64).root();
            match attnrules_core::eval::build_exemplar_dataset(&index, j, fref, &corpus, ex.n_exemplars, seed) {
                Ok(d) => {
                    write_json(&path, &d)?;
                    datasets.insert(j, d);
                }
                Err(attnrules_core::Error::Ineligible { reason, .. }) => summary.ineligible.push((j, reason)),
                Err(e) => return Err(e.into()),
            }
        } else if path.exists() {
            datasets.insert(j, read_json(&path)?);
        } else if ex.method == RankMethod::Weight && index.active_sequence_count(j) >= ex.n_exemplars {
            // Weight ranking needs no exemplars; eligibility follows the index.
            datasets.insert(j, ExemplarDataset {
                feature: output_ref(head, j),
                positives: Vec::new(),
                negatives: Vec::new(),
                seed: 0,
            });
        } else {
            summary.ineligible.push((j, "no exemplar dataset".into()));
        }
    }
    fs::create_dir_all(dir.join(rundir::RULES))?;
    if datasets.is_empty() {
        log::warn!("no output feature of {head} is eligible; the rules directory stays empty");
    }

    let labels = token_labels(model.vocab(), model.token_embeddings(), &sae_in)?;
    let rulesets: Vec<RuleSet> = datasets
        .par_iter()
        .map(|(&j, data)| -> Result<RuleSet> {
            let ctx = RuleContext::new(attn, &sae_in, sae_out.encoder_row(j))?.with_names("in", Some(&labels));
            let candidates = select_candidates(&ctx, ex.k_keys, ex.k_queries)?;
            let mut ranked = match ex.method {
                RankMethod::Weight => rank_weight_based(candidates),
                RankMethod::Gradient => {
                    let train = data
                        .split(Split::Train)
                        .map(|(e, _)| Ok(ExampleFeatures::new(features_of(&model, &sae_in, &e.tokens)?, e.target)?))
                        .collect::<Result<Vec<_>>>()?;
                    rank_gradient_based(&ctx, candidates, &train)?
                }
            };
            ranked.truncate(ex.max_rules);
            let mut rs = RuleSet::new(output_ref(head, j), ex.method, ranked);
            if ex.absence && !rs.rules.is_empty() {
                rs.absence = detect_distractor(&rs, &ctx)?;
            }
            if ex.counting {
                let seed = cfg.seeds().child("counting").index(j as u64);
                let exemplars = counting_exemplars(&model, &sae_in, &index, &corpus, j, ex.counting_sample, seed)?;
                rs.counting = detect_counting(&rs, &index, &exemplars, ex.counting_threshold, ex.counting_min_spread)?;
            }
            Ok(rs)
        })
        .collect::<Result<_>>()?;
    for rs in &rulesets {
        write_json(&dir.join(feature_file(rundir::RULES, &rs.output_feature.to_string())), rs)?;
    }
    write_manifest(dir, cfg, "extract")?;
    log::info!(
        "extracted rules for {} of {n_out} features ({} ineligible)",
        rulesets.len(),
        summary.ineligible.len()
    );
    summary.rulesets = rulesets;
    Ok(summary)
}

/// Rule sets and datasets on disk, keyed by output feature index.
pub fn load_rules_and_datasets(
    dir: &Path,
    head: HeadId,
    n_out: usize,
) -> Result<(BTreeMap<usize, RuleSet>, BTreeMap<usize, ExemplarDataset>)> {
    let mut rules = BTreeMap::new();
    let mut datasets = BTreeMap::new();
    for (sub, is_rules) in [(rundir::RULES, true), (rundir::DATASETS, false)] {
        let d = dir.join(sub);
        if !d.is_dir() {
            continue;
        }
        for entry in fs::read_dir(&d)? {
            let path = entry?.path();
            let Some(stem) = path.file_name().and_then(|s| s.to_str()).and_then(|s| s.strip_suffix(".json")) else {
                continue;
            };
            let Some(j) = parse_feature_id(stem, head, n_out) else {
                log::warn!("ignoring {}", path.display());
                continue;
            };
            if is_rules {
                rules.insert(j, read_json(&path)?);
            } else {
                datasets.insert(j, read_json(&path)?);
            }
        }
    }
    Ok((rules, datasets))
}

/// Scores every extracted rule set on its dataset and writes the
/// per-feature and aggregate reports.
pub fn cmd_eval(cfg: &RunConfig) -> Result<Vec<FeatureMetricsRow>> {
    let dir = &cfg.run.dir;
    let _lock = RunLock::acquire(dir)?;
    let model = load_model(dir)?;
    let sae_in = load_sae(dir, rundir::SAE_IN)?;
    let sae_out = load_sae(dir, rundir::SAE_OUT)?;
    let head = cfg.head()?;
    if !dir.join(rundir::RULES).is_dir() {
        return Err(missing("rules directory", &dir.join(rundir::RULES)));
    }
    let (rules, datasets) = load_rules_and_datasets(dir, head, sae_out.n_features())?;
    if datasets.is_empty() {
        return Err(PipelineError::Dependency(format!(
            "no exemplar datasets in {}",
            dir.join(rundir::DATASETS).display()
        )));
    }
    let options = PredictOptions {
        absence_aware: cfg.eval.absence_aware,
    };
    let mut rows = Vec::new();
    for (j, rs) in &rules {
        let data = datasets
            .get(j)
            .ok_or_else(|| PipelineError::Dependency(format!("no dataset for {}", rs.output_feature)))?;
        for (top_n, m) in evaluate_ruleset(&model, &sae_in, rs, data, cfg.eval.split, &cfg.eval.top_n, options)? {
            rows.push(FeatureMetricsRow {
                layer: head.layer,
                head: head.head,
                feature: *j,
                method: rs.method,
                top_n,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
            });
        }
    }
    let reports = dir.join(rundir::REPORTS);
    let files = [
        format!("{}/features.csv", rundir::REPORTS),
        format!("{}/aggregate_layer.csv", rundir::REPORTS),
        format!("{}/aggregate_head.csv", rundir::REPORTS),
    ];
    archive(dir, "eval", &files.iter().map(String::as_str).collect::<Vec<_>>())?;
    fs::create_dir_all(&reports)?;
    write_feature_csv(&reports.join("features.csv"), &rows)?;
    write_aggregate_csv(&reports.join("aggregate_layer.csv"), &aggregate_report(&rows, Grouping::Layer))?;
    write_aggregate_csv(&reports.join("aggregate_head.csv"), &aggregate_report(&rows, Grouping::Head))?;
    write_manifest(dir, cfg, "eval")?;
    Ok(rows)
}

/// Per-repeat activations of one intervention.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterventionResult {
    pub feature: String,
    pub token: String,
    pub repeats: usize,
    /// Mean over exemplars for `0..=repeats`; entry 0 is the baseline.
    pub means: Vec<f64>,
    pub per_sequence: Vec<SequenceSeries>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSeries {
    pub seq: usize,
    pub activations: Vec<f32>,
}

/// Prepends `token` `0..=repeats` times to the `sample` most active
/// positives of `data` and records the feature's activation.
pub fn intervention(
    model: &ToyModel,
    head: HeadId,
    sae_out: &SaeDictionary,
    data: &ExemplarDataset,
    token: usize,
    repeats: usize,
    sample: usize,
) -> Result<InterventionResult> {
    let mut positives: Vec<_> = data.positives.iter().collect();
    positives.sort_by(|a, b| b.activation.total_cmp(&a.activation).then(a.seq.cmp(&b.seq)));
    positives.truncate(sample);
    let exemplars: Vec<(TokenSequence, usize)> = positives
        .iter()
        .map(|e| (TokenSequence::new(e.tokens.clone()), e.target))
        .collect();
    let series = intervene_series(model, head, sae_out, data.feature.index, &exemplars, token, repeats)?;
    let means = (0..=repeats)
        .map(|r| {
            if series.is_empty() {
                0.0
            } else {
                series.iter().map(|s| f64::from(s[r])).sum::<f64>() / series.len() as f64
            }
        })
        .collect();
    Ok(InterventionResult {
        feature: data.feature.to_string(),
        token: model.token(token).unwrap_or_default().to_string(),
        repeats,
        means,
        per_sequence: positives
            .iter()
            .zip(series)
            .map(|(e, activations)| SequenceSeries { seq: e.seq, activations })
            .collect(),
    })
}

/// Runs the configured intervention and writes `reports/intervene_<feature>.csv`.
pub fn cmd_intervene(cfg: &RunConfig) -> Result<InterventionResult> {
    let dir = &cfg.run.dir;
    let iv = &cfg.intervene;
    let _lock = RunLock::acquire(dir)?;
    let model = load_model(dir)?;
    let sae_in = load_sae(dir, rundir::SAE_IN)?;
    let sae_out = load_sae(dir, rundir::SAE_OUT)?;
    let head = cfg.head()?;
    let id = iv
        .feature
        .as_deref()
        .ok_or_else(|| PipelineError::Config("intervene.feature is not set".into()))?;
    let j = parse_feature_id(id, head, sae_out.n_features())
        .ok_or_else(|| PipelineError::Config(format!("unknown feature `{id}`")))?;
    let (rules, datasets) = load_rules_and_datasets(dir, head, sae_out.n_features())?;
    let data = datasets
        .get(&j)
        .ok_or_else(|| PipelineError::Dependency(format!("no exemplar dataset for {id}")))?;
    let token = match &iv.token {
        Some(w) => model
            .token_id(w)
            .ok_or_else(|| PipelineError::Config(format!("unknown token `{w}`")))?,
        None => {
            let ann = rules.get(&j).and_then(|r| r.absence.as_ref()).ok_or_else(|| {
                PipelineError::Config(format!("{id} has no detected distractor; set intervene.token"))
            })?;
            pick_distractor_token(&sae_in, ann.distractor.index, model.token_embeddings())?
        }
    };
    let result = intervention(&model, head, &sae_out, data, token, iv.max_repeats, iv.sample)?;
    let rows: Vec<InterventionRow> = result
        .per_sequence
        .iter()
        .flat_map(|s| {
            s.activations.iter().enumerate().map(|(r, &a)| InterventionRow {
                feature: id.to_string(),
                seq: s.seq,
                repeats: r,
                activation: a,
            })
        })
        .collect();
    let rel = format!("{}/intervene_{id}.csv", rundir::REPORTS);
    archive(dir, "intervene", &[&rel])?;
    fs::create_dir_all(dir.join(rundir::REPORTS))?;
    write_intervention_csv(&dir.join(&rel), &rows)?;
    write_manifest(dir, cfg, "intervene")?;
    Ok(result)
}

/// Checks every artifact against the manifest.
pub fn cmd_verify(dir: &Path) -> Result<usize> {
    let problems = rundir::verify(dir)?;
    if problems.is_empty() {
        let n = rundir::read_manifest(dir)?.map(|m| m.artifacts.len()).unwrap_or(0);
        log::info!("{n} artifacts verified in {}", dir.display());
        Ok(n)
    } else {
        Err(PipelineError::Integrity(problems.join("; ")))
    }
}

/// Index summary of a run, if `extract` has written one.
pub fn load_index_summary(dir: &Path) -> Result<Option<IndexSummary>> {
    let p: PathBuf = dir.join(rundir::INDEX_SUMMARY);
    if p.exists() {
        Ok(Some(read_json(&p)?))
    } else {
        Ok(None)
    }
}
