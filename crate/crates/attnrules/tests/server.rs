// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;

use attnrules::pipeline;
use attnrules::server::{router, scale, ApiSession, MAX_REPEATS};
use attnrules::RunConfig;
use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

/// Two skip-gram plants, one absence plant and one counting plant, extracted
/// and evaluated.
fn fixture(dir: &Path) -> Router {
    let args: Vec<String> = [
        "--run.dir",
        &dir.display().to_string(),
        "--synth.skipgram",
        "2",
        "--synth.absence",
        "1",
        "--synth.counting",
        "1",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let cfg = RunConfig::load(None, &args).unwrap();
    pipeline::cmd_synth(&cfg).unwrap();
    pipeline::cmd_extract(&cfg).unwrap();
    pipeline::cmd_eval(&cfg).unwrap();
    router(ApiSession::load(dir, cfg.head().unwrap(), 10).unwrap(), None)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string()))
            .unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

#[tokio::test]
async fn feature_list_is_sorted_and_versioned() {
    let tmp = tempfile::tempdir().unwrap();
    let app = fixture(tmp.path());
    let (status, body) = call(&app, "GET", "/api/v1/features", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["schema_version"], 1);
    let ids: Vec<&str> = body["features"].as_array().unwrap().iter().map(|f| f["feature"].as_str().unwrap()).collect();
    assert_eq!(ids, ["L0H0.0", "L0H0.1", "L0H0.2", "L0H0.3"]);
    let f2 = &body["features"][2];
    assert_eq!(f2["has_absence"], true);
    assert!(f2["active_sequences"].as_u64().unwrap() >= 150);
    assert_eq!(body["features"][3]["has_counting"], true);
}

#[tokio::test]
async fn run_without_rules_lists_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let args: Vec<String> = ["--run.dir", &tmp.path().display().to_string(), "--synth.skipgram", "0"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let cfg = RunConfig::load(None, &args).unwrap();
    pipeline::cmd_synth(&cfg).unwrap();
    pipeline::cmd_extract(&cfg).unwrap();
    let app = router(ApiSession::load(tmp.path(), cfg.head().unwrap(), 10).unwrap(), None);
    let (status, body) = call(&app, "GET", "/api/v1/features", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["features"], json!([]));
    let (status, body) = call(&app, "GET", "/api/v1/reports/aggregate", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["rows"], json!([]));
}

#[tokio::test]
async fn unknown_features_are_404() {
    let tmp = tempfile::tempdir().unwrap();
    let app = fixture(tmp.path());
    for uri in ["/api/v1/features/L0H0.99", "/api/v1/features/L1H0.0", "/api/v1/features/nonsense"] {
        let (status, body) = call(&app, "GET", uri, None).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{uri}");
        assert_eq!(body["schema_version"], 1);
        assert_eq!(body["error"]["status"], 404);
    }
    let (status, _) = call(&app, "POST", "/api/v1/features/L0H0.99/intervene", Some(json!({"token": "k0", "repeats": 1}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn detail_carries_rules_metrics_and_scaled_heatmaps() {
    let tmp = tempfile::tempdir().unwrap();
    let app = fixture(tmp.path());
    let (status, body) = call(&app, "GET", "/api/v1/features/L0H0.0", None).await;
    assert_eq!(status, StatusCode::OK);
    let top = &body["ruleset"]["rules"][0];
    assert_eq!(top["key"]["label"], "k0");
    assert_eq!(top["query"]["label"], "q0");
    let top_ns: Vec<u64> = body["metrics"].as_array().unwrap().iter().map(|m| m["top_n"].as_u64().unwrap()).collect();
    assert_eq!(top_ns, [1, 2, 3, 5, 10]);

    let exemplars = body["exemplars"].as_array().unwrap();
    assert_eq!(exemplars.len(), 10);
    // Activations are scaled against the largest positive of the dataset.
    let datasets = tmp.path().join("datasets/L0H0.0.json");
    let data: Value = serde_json::from_str(&std::fs::read_to_string(datasets).unwrap()).unwrap();
    let max = data["positives"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| e["activation"].as_f64().unwrap() as f32)
        .fold(0.0f32, f32::max);
    for e in exemplars {
        let target = e["target"].as_u64().unwrap() as usize;
        let cells = e["tokens"].as_array().unwrap();
        let dmax = cells.iter().filter_map(|c| c["dfa"].as_f64()).fold(0.0f64, |m, v| m.max(v.abs())) as f32;
        for (i, c) in cells.iter().enumerate() {
            let a = c["activation"].as_f64().unwrap() as f32;
            assert_eq!(c["activation_scaled"].as_i64().unwrap(), i64::from(scale(a, max)));
            match c["dfa"].as_f64() {
                Some(d) => {
                    assert!(i <= target);
                    assert_eq!(c["dfa_scaled"].as_i64().unwrap(), i64::from(scale(d as f32, dmax)));
                }
                None => assert!(i > target),
            }
        }
        // The attribution peaks on the rule's key token.
        let peak = cells
            .iter()
            .filter(|c| c["dfa_scaled"] == 100)
            .map(|c| c["token"].as_str().unwrap())
            .collect::<Vec<_>>();
        assert_eq!(peak, ["k0"], "{e}");
        assert!(cells[target]["activation_scaled"].as_i64().unwrap() > 0);
    }
}

#[tokio::test]
async fn exemplars_by_split() {
    let tmp = tempfile::tempdir().unwrap();
    let app = fixture(tmp.path());
    let (status, body) = call(&app, "GET", "/api/v1/features/L0H0.1/exemplars?split=val", None).await;
    assert_eq!(status, StatusCode::OK);
    let ex = body["exemplars"].as_array().unwrap();
    assert_eq!(ex.len(), 100);
    assert!(ex.iter().all(|e| e["split"] == "val"));
    assert_eq!(ex.iter().filter(|e| e["positive"] == true).count(), 50);
    let (_, default) = call(&app, "GET", "/api/v1/features/L0H0.1/exemplars", None).await;
    assert_eq!(default["split"], "test");
    let (status, _) = call(&app, "GET", "/api/v1/features/L0H0.1/exemplars?split=holdout", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn intervention_requests() {
    let tmp = tempfile::tempdir().unwrap();
    let app = fixture(tmp.path());
    let uri = "/api/v1/features/L0H0.2/intervene";

    let (status, zero) = call(&app, "POST", uri, Some(json!({"token": "d2", "repeats": 0}))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(zero["means"].as_array().unwrap().len(), 1);
    assert_eq!(zero["baseline"], zero["means"][0]);
    assert_eq!(zero["sample"], 10);

    let body = json!({"token": "d2", "repeats": 4, "sample": 5});
    let (status, a) = call(&app, "POST", uri, Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK);
    let (_, b) = call(&app, "POST", uri, Some(body)).await;
    assert_eq!(a, b);
    assert_eq!(a["sample"], 5);
    assert_eq!(a["schema_version"], 1);
    let means: Vec<f64> = a["means"].as_array().unwrap().iter().map(|v| v.as_f64().unwrap()).collect();
    assert_eq!(means.len(), 5);
    assert!(means[4] < means[0], "{means:?}");

    let (status, err) = call(&app, "POST", uri, Some(json!({"token": "d2", "repeats": MAX_REPEATS + 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(err["error"]["message"].as_str().unwrap().contains("repeats"));
    let (status, _) = call(&app, "POST", uri, Some(json!({"token": "nope", "repeats": 1}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn aggregate_and_health() {
    let tmp = tempfile::tempdir().unwrap();
    let app = fixture(tmp.path());
    let (status, body) = call(&app, "GET", "/healthz", None).await;
    assert_eq!((status, body["status"].as_str()), (StatusCode::OK, Some("ok")));

    let (_, layer) = call(&app, "GET", "/api/v1/reports/aggregate?group=layer", None).await;
    let rows = layer["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r["group"] == "L0" && r["features"] == 4));
    let (_, head) = call(&app, "GET", "/api/v1/reports/aggregate?group=head", None).await;
    assert_eq!(head["rows"][0]["group"], "L0H0");
    assert_eq!(head["rows"][0]["f1"], rows[0]["f1"]);
    let (status, _) = call(&app, "GET", "/api/v1/reports/aggregate?group=model", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}
