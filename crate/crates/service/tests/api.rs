use std::path::PathBuf;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use copersona_core::pipeline::Pipeline;
use copersona_core::store::Store;
use copersona_service::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn config_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/fixtures/pipeline.toml")
}

fn app(root: &std::path::Path) -> Router {
    router(AppState::new(Pipeline::new(Store::open(root).unwrap())))
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req
            .header("content-type", "application/json")
            .body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = if bytes.is_empty() {
        Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, value)
}

async fn create_and_extract(app: &Router) -> String {
    let (s, run) = call(app, Method::POST, "/v1/runs", Some(json!({"config_path": config_path()}))).await;
    assert_eq!(s, StatusCode::CREATED, "{run}");
    let id = run["run_id"].as_str().unwrap().to_string();
    for expected in ["collect", "extract", "validate"] {
        let (s, run) = call(app, Method::POST, &format!("/v1/runs/{id}/phase"), Some(json!({"wait": true}))).await;
        assert_eq!(s, StatusCode::OK, "{run}");
        assert_eq!(run["phase"], expected);
    }
    id
}

async fn approve_all(app: &Router, id: &str, stage: &str, reviewer: &str) {
    let (_, q) = call(app, Method::GET, &format!("/v1/review/queue?run={id}&stage={stage}"), None).await;
    for item in q["items"].as_array().unwrap() {
        let item_id = item["item"]["item_id"].as_str().unwrap();
        let (s, body) = call(
            app,
            Method::POST,
            &format!("/v1/review/items/{item_id}/decision"),
            Some(json!({"run_id": id, "reviewer_id": reviewer, "stage": stage, "decision": "approve"})),
        )
        .await;
        assert_eq!(s, StatusCode::OK, "{body}");
    }
}

#[tokio::test]
async fn health_reports_version() {
    let dir = tempfile::tempdir().unwrap();
    let (s, body) = call(&app(dir.path()), Method::GET, "/v1/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(body["version"], copersona_core::VERSION);
}

#[tokio::test]
async fn review_flow_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create_and_extract(&app).await;

    let (s, q) = call(&app, Method::GET, "/v1/review/queue?stage=structural", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(q["total"], 6);
    let first = q["items"][0]["item"]["item_id"].as_str().unwrap().to_string();
    let decision_uri = format!("/v1/review/items/{first}/decision");

    // reject without comment is refused
    let (s, body) = call(
        &app,
        Method::POST,
        &decision_uri,
        Some(json!({"reviewer_id": "lay-1", "stage": "structural", "decision": "reject"})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    assert_eq!(body["error"]["kind"], "validation");

    let approve = json!({"reviewer_id": "lay-1", "stage": "structural", "decision": "approve"});
    let (s, body) = call(&app, Method::POST, &decision_uri, Some(approve.clone())).await;
    assert_eq!(s, StatusCode::OK, "{body}");
    assert_eq!(body["item"]["status"], "approved");

    // read-your-writes: the item left the queue
    let (_, q) = call(&app, Method::GET, "/v1/review/queue?stage=structural", None).await;
    assert_eq!(q["total"], 5);
    assert!(q["items"].as_array().unwrap().iter().all(|i| i["item"]["item_id"] != first.as_str()));

    let (s, body) = call(&app, Method::POST, &decision_uri, Some(approve)).await;
    assert_eq!(s, StatusCode::CONFLICT, "{body}");

    let (s, body) = call(&app, Method::POST, &format!("/v1/runs/{id}/phase"), Some(json!({"phase": "classify", "wait": true}))).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(body["error"]["kind"], "gate");

    let (s, board) = call(&app, Method::GET, &format!("/v1/runs/{id}/review"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(board["state"], "structural_review");
}

#[tokio::test]
async fn full_run_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let id = create_and_extract(&app).await;
    approve_all(&app, &id, "structural", "lay-1").await;
    approve_all(&app, &id, "domain_expert", "expert-1").await;
    // validate (records approval), classify, evaluate
    for expected in ["classify", "evaluate", "done"] {
        let (s, run) = call(&app, Method::POST, &format!("/v1/runs/{id}/phase"), Some(json!({"wait": true}))).await;
        assert_eq!(s, StatusCode::OK, "{run}");
        assert_eq!(run["phase"], expected);
    }
    let (s, run) = call(&app, Method::GET, &format!("/v1/runs/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(run["phase"], "done");

    let (s, report) = call(&app, Method::GET, &format!("/v1/reports/{id}"), None).await;
    assert_eq!(s, StatusCode::OK);
    let (s, m) = call(&app, Method::GET, &format!("/v1/metrics/{id}/confusion"), None).await;
    assert_eq!(s, StatusCode::OK);
    let cells: u64 = m["counts"].as_array().unwrap().iter().flat_map(|r| r.as_array().unwrap()).map(|c| c.as_u64().unwrap()).sum();
    assert_eq!(cells, report["agreement"]["n"].as_u64().unwrap());
    assert_eq!(m["labels"].as_array().unwrap().len(), 5);

    let draft = run["approved_draft"].as_str().unwrap();
    let (s, tx) = call(&app, Method::GET, &format!("/v1/taxonomies/{draft}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(tx["categories"].as_array().unwrap().len(), 5);

    // responses are stable across a restart on the same store
    let again = self::app(dir.path());
    let (_, run2) = call(&again, Method::GET, &format!("/v1/runs/{id}"), None).await;
    assert_eq!(run, run2);
    let (_, report2) = call(&again, Method::GET, &format!("/v1/reports/{id}"), None).await;
    assert_eq!(report, report2);
}

#[tokio::test]
async fn background_phase_is_pollable() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (_, run) = call(&app, Method::POST, "/v1/runs", Some(json!({"config_path": config_path()}))).await;
    let id = run["run_id"].as_str().unwrap();
    let (s, body) = call(&app, Method::POST, &format!("/v1/runs/{id}/phase"), None).await;
    assert_eq!(s, StatusCode::ACCEPTED, "{body}");
    let mut phase = Value::Null;
    for _ in 0..100 {
        let (_, run) = call(&app, Method::GET, &format!("/v1/runs/{id}"), None).await;
        phase = run["phase"].clone();
        if phase == "collect" && run["running"].is_null() {
            break;
        }
        tokio::time::sleep(Duration::from_millis(50)).await;
    }
    assert_eq!(phase, "collect");
}

#[tokio::test]
async fn errors_and_pagination() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path());
    let (s, body) = call(&app, Method::GET, "/v1/runs/run-missing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(body["error"]["kind"], "not_found");
    let (s, _) = call(&app, Method::GET, "/v1/reports/run-missing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, Method::POST, "/v1/runs", Some(json!({}))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    for _ in 0..3 {
        call(&app, Method::POST, "/v1/runs", Some(json!({"config_path": config_path()}))).await;
    }
    let (s, page) = call(&app, Method::GET, "/v1/runs?offset=1&limit=1", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(page["total"], 3);
    assert_eq!(page["items"].as_array().unwrap().len(), 1);
}
