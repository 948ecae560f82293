// SPDX-License-Identifier: MIT OR Apache-2.0

//! Read-mostly JSON API over one run directory.
//!
//! Every payload carries `schema_version`. GET responses depend only on the
//! files in the run; `POST …/intervene` computes on the loaded model and
//! writes nothing.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use attnrules_core::eval::{
    aggregate_report, dfa, output_activations, read_feature_csv, Exemplar, ExemplarDataset, FeatureMetricsRow,
    Grouping, Split,
};
use attnrules_core::model::{HeadId, TokenSequence, ToyModel};
use attnrules_core::rules::RuleSet;
use attnrules_core::sae::{IndexSummary, SaeDictionary};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::Result;
use crate::pipeline::{
    intervention, load_index_summary, load_model, load_rules_and_datasets, load_sae, parse_feature_id,
};
use crate::rundir::{self, SCHEMA_VERSION};

/// Interventions prepend the token at most this many times.
pub const MAX_REPEATS: usize = 8;
/// Exemplars shown in the feature detail view.
pub const DETAIL_EXEMPLARS: usize = 10;

/// Immutable state of one served run.
pub struct ApiSession {
    pub dir: PathBuf,
    pub model: ToyModel,
    pub head: HeadId,
    pub sae_in: SaeDictionary,
    pub sae_out: SaeDictionary,
    pub rules: BTreeMap<usize, RuleSet>,
    pub datasets: BTreeMap<usize, ExemplarDataset>,
    pub summary: Option<IndexSummary>,
    pub metrics: Vec<FeatureMetricsRow>,
    pub default_sample: usize,
}

impl ApiSession {
    pub fn load(dir: &Path, head: HeadId, default_sample: usize) -> Result<Self> {
        let model = load_model(dir)?;
        let sae_in = load_sae(dir, rundir::SAE_IN)?;
        let sae_out = load_sae(dir, rundir::SAE_OUT)?;
        let (rules, datasets) = load_rules_and_datasets(dir, head, sae_out.n_features())?;
        let features_csv = dir.join(rundir::REPORTS).join("features.csv");
        let metrics = if features_csv.exists() {
            read_feature_csv(&features_csv)?
        } else {
            Vec::new()
        };
        Ok(Self {
            dir: dir.to_path_buf(),
            summary: load_index_summary(dir)?,
            model,
            head,
            sae_in,
            sae_out,
            rules,
            datasets,
            metrics,
            default_sample,
        })
    }

    fn feature_id(&self, index: usize) -> String {
        format!("{}.{index}", self.head)
    }

    fn summary_of(&self, index: usize) -> FeatureSummary {
        let rs = self.rules.get(&index);
        FeatureSummary {
            feature: self.feature_id(index),
            layer: self.head.layer,
            head: self.head.head,
            index,
            active_sequences: self
                .summary
                .as_ref()
                .and_then(|s| s.active_sequences.get(index).copied())
                .unwrap_or(0),
            has_absence: rs.is_some_and(|r| r.absence.is_some()),
            has_counting: rs.is_some_and(|r| r.counting.is_some()),
        }
    }

    /// Activation and DFA of every token of one exemplar. Activations are
    /// scaled against `max`, the feature's largest exemplar activation; DFA
    /// against the exemplar's largest absolute attribution.
    fn exemplar_view(&self, feature: usize, e: &Exemplar, positive: bool, max: f32) -> Result<ExemplarView> {
        let seq = TokenSequence::new(e.tokens.clone());
        let acts = output_activations(&self.model, self.head, &self.sae_out, feature, &seq)?;
        let x = self.model.embed(&seq)?;
        let attn = self.model.head(self.head)?;
        let d = dfa(attn, self.sae_out.encoder_row(feature), &x, e.target)?;
        let dmax = d.iter().fold(0.0f32, |m, v| m.max(v.abs()));
        let tokens = e
            .tokens
            .iter()
            .enumerate()
            .map(|(i, &id)| {
                let a = acts[i];
                let dfa = d.get(i).copied();
                TokenCell {
                    token: self.model.token(id).unwrap_or_default().to_string(),
                    activation: a,
                    activation_scaled: scale(a, max),
                    dfa,
                    dfa_scaled: dfa.map(|v| scale(v, dmax)),
                }
            })
            .collect();
        Ok(ExemplarView {
            seq: e.seq,
            split: e.split,
            positive,
            target: e.target,
            tokens,
        })
    }
}

/// `round(100 · v / max)`, 0 when `max` is not positive.
pub fn scale(v: f32, max: f32) -> i32 {
    if max > 0.0 {
        (100.0 * f64::from(v) / f64::from(max)).round() as i32
    } else {
        0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub feature: String,
    pub layer: usize,
    pub head: usize,
    pub index: usize,
    pub active_sequences: usize,
    pub has_absence: bool,
    pub has_counting: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenCell {
    pub token: String,
    pub activation: f32,
    pub activation_scaled: i32,
    /// Attribution to the exemplar's target; absent after the target.
    pub dfa: Option<f32>,
    pub dfa_scaled: Option<i32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExemplarView {
    pub seq: usize,
    pub split: Split,
    pub positive: bool,
    pub target: usize,
    pub tokens: Vec<TokenCell>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct InterveneRequest {
    pub token: String,
    pub repeats: usize,
    #[serde(default)]
    pub sample: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct SplitQuery {
    split: Option<String>,
}

#[derive(Debug, Deserialize)]
struct GroupQuery {
    group: Option<String>,
}

struct ApiError(StatusCode, String);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = json!({
            "schema_version": SCHEMA_VERSION,
            "error": { "status": self.0.as_u16(), "message": self.1 },
        });
        (self.0, Json(body)).into_response()
    }
}

impl From<crate::error::PipelineError> for ApiError {
    fn from(e: crate::error::PipelineError) -> Self {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

impl From<attnrules_core::Error> for ApiError {
    fn from(e: attnrules_core::Error) -> Self {
        ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
    }
}

type ApiResult = std::result::Result<Json<Value>, ApiError>;
type Shared = Arc<ApiSession>;

fn versioned(mut v: Value) -> Json<Value> {
    if let Value::Object(m) = &mut v {
        m.insert("schema_version".into(), json!(SCHEMA_VERSION));
    }
    Json(v)
}

fn lookup(s: &ApiSession, id: &str) -> std::result::Result<usize, ApiError> {
    parse_feature_id(id, s.head, s.sae_out.n_features())
        .filter(|j| s.rules.contains_key(j))
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no rules for feature `{id}`")))
}

async fn healthz() -> Json<Value> {
    versioned(json!({ "status": "ok" }))
}

async fn features(State(s): State<Shared>) -> Json<Value> {
    // Keys are feature indices of one head, so map order is (layer, head, feature).
    let list: Vec<FeatureSummary> = s.rules.keys().map(|&j| s.summary_of(j)).collect();
    versioned(json!({ "features": list }))
}

fn top_positives(d: &ExemplarDataset, n: usize) -> Vec<&Exemplar> {
    let mut p: Vec<&Exemplar> = d.positives.iter().collect();
    p.sort_by(|a, b| b.activation.total_cmp(&a.activation).then(a.seq.cmp(&b.seq)));
    p.truncate(n);
    p
}

fn feature_max(d: &ExemplarDataset) -> f32 {
    d.positives.iter().fold(0.0f32, |m, e| m.max(e.activation))
}

async fn feature_detail(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult {
    let j = lookup(&s, &id)?;
    let metrics: Vec<&FeatureMetricsRow> = s
        .metrics
        .iter()
        .filter(|r| r.layer == s.head.layer && r.head == s.head.head && r.feature == j)
        .collect();
    let exemplars = match s.datasets.get(&j) {
        Some(d) => {
            let max = feature_max(d);
            top_positives(d, DETAIL_EXEMPLARS)
                .into_iter()
                .map(|e| s.exemplar_view(j, e, true, max))
                .collect::<Result<Vec<_>>>()?
        }
        None => Vec::new(),
    };
    Ok(versioned(json!({
        "feature": s.summary_of(j),
        "ruleset": s.rules[&j],
        "metrics": metrics,
        "exemplars": exemplars,
    })))
}

async fn feature_exemplars(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<SplitQuery>,
) -> ApiResult {
    let j = lookup(&s, &id)?;
    let split: Split = q
        .split
        .as_deref()
        .unwrap_or("test")
        .parse()
        .map_err(|e: attnrules_core::Error| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    let d = s
        .datasets
        .get(&j)
        .ok_or_else(|| ApiError(StatusCode::NOT_FOUND, format!("no exemplars for `{id}`")))?;
    let max = feature_max(d);
    let views = d
        .split(split)
        .map(|(e, positive)| s.exemplar_view(j, e, positive, max))
        .collect::<Result<Vec<_>>>()?;
    Ok(versioned(json!({ "feature": id, "split": split, "exemplars": views })))
}

async fn intervene(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Json(req): Json<InterveneRequest>,
) -> ApiResult {
    let j = lookup(&s, &id)?;
    if req.repeats > MAX_REPEATS {
        return Err(ApiError(
            StatusCode::BAD_REQUEST,
            format!("repeats {} exceeds the cap of {MAX_REPEATS}", req.repeats),
        ));
    }
    let token = s
        .model
        .token_id(&req.token)
        .ok_or_else(|| ApiError(StatusCode::BAD_REQUEST, format!("unknown token `{}`", req.token)))?;
    if !s.datasets.contains_key(&j) {
        return Err(ApiError(StatusCode::NOT_FOUND, format!("no exemplars for `{id}`")));
    }
    let sample = req.sample.unwrap_or(s.default_sample);
    let shared = s.clone();
    let result = tokio::task::spawn_blocking(move || {
        intervention(&shared.model, shared.head, &shared.sae_out, &shared.datasets[&j], token, req.repeats, sample)
    })
    .await
    .map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    let baseline = result.means[0];
    let mut v = serde_json::to_value(&result).map_err(|e| ApiError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))?;
    v["baseline"] = json!(baseline);
    v["sample"] = json!(result.per_sequence.len());
    Ok(versioned(v))
}

async fn aggregate(State(s): State<Shared>, Query(q): Query<GroupQuery>) -> ApiResult {
    let group_name = q.group.as_deref().unwrap_or("layer");
    let group: Grouping = group_name
        .parse()
        .map_err(|e: attnrules_core::Error| ApiError(StatusCode::BAD_REQUEST, e.to_string()))?;
    Ok(versioned(json!({
        "group": group_name,
        "rows": aggregate_report(&s.metrics, group),
    })))
}

/// The API routes, plus `static_dir` (when given) served at `/`.
pub fn router(session: ApiSession, static_dir: Option<&Path>) -> Router {
    let api = Router::new()
        .route("/healthz", get(healthz))
        .route("/api/v1/features", get(features))
        .route("/api/v1/features/{id}", get(feature_detail))
        .route("/api/v1/features/{id}/exemplars", get(feature_exemplars))
        .route("/api/v1/features/{id}/intervene", post(intervene))
        .route("/api/v1/reports/aggregate", get(aggregate))
        .with_state(Arc::new(session));
    match static_dir {
        Some(d) => api.fallback_service(tower_http::services::ServeDir::new(d)),
        None => api,
    }
}

/// Serves until Ctrl-C.
pub async fn serve(session: ApiSession, addr: SocketAddr, static_dir: Option<&Path>) -> Result<()> {
    let dir = session.dir.clone();
    let app = router(session, static_dir);
    let listener = tokio::net::TcpListener::bind(addr).await?;
    log::info!("serving {} on http://{}", dir.display(), listener.local_addr()?);
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
