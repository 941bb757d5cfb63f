use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use ond_core::benchkit::build_benchmark;
use ond_core::featurestore::{generate_synthetic, SyntheticConfig};
use ond_core::looprunner::{initial_session, RunDir};
use ond_core::optim::TrainConfig;
use ond_gateway::api::{router, Service, Shared};
use serde_json::{json, Value};
use tower::ServiceExt;

fn fixture(root: &Path) -> Shared {
    let ds = generate_synthetic(&SyntheticConfig {
        feature_dim: 8,
        id_clusters: 2,
        ood_clusters: 9,
        samples_per_cluster: 6,
        noise_sigma: 0.3,
        seed: 4,
        ..SyntheticConfig::default()
    })
    .unwrap();
    let bench = build_benchmark(&ds, &[0, 1].into_iter().collect(), &ds.ood_classes(), 3, 3, 4).unwrap();
    let cfg = TrainConfig {
        widths: vec![8, 8, 8, 8],
        batch_size: 16,
        epochs: 3,
        warmup_epochs: 1,
        incremental_epochs: 2,
        ..TrainConfig::iconp()
    };
    let run = RunDir::create(root, &ds, &bench, &cfg).unwrap();
    let state = initial_session(&ds, &bench, &cfg).unwrap();
    run.save_state(&state).unwrap();
    Arc::new(Service::open(run).unwrap())
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map(|b| Body::from(b.to_string())).unwrap_or_else(Body::empty))
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let value = serde_json::from_slice(&bytes).unwrap_or(Value::Null);
    (status, value)
}

async fn answer(app: &Router, item: u64, verdict: &str) -> (StatusCode, Value) {
    let body = json!({ "item_id": item, "verdict": verdict }).to_string();
    call(app, "POST", "/api/feedback", Some(&body)).await
}

async fn queue_ids(app: &Router) -> Vec<u64> {
    let (_, q) = call(app, "GET", "/api/queue", None).await;
    q["items"].as_array().unwrap().iter().map(|i| i["item_id"].as_u64().unwrap()).collect()
}

#[tokio::test]
async fn status_and_queue_after_first_session() {
    let tmp = tempfile::tempdir().unwrap();
    let app = router(fixture(tmp.path()), None);
    let (code, s) = call(&app, "GET", "/api/status", None).await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(s["session_index"], 1);
    assert_eq!(s["ledger_size"], 0);
    assert!(s["queue_size"].as_u64().unwrap() > 3);

    let (code, q) = call(&app, "GET", "/api/queue?limit=3", None).await;
    assert_eq!(code, StatusCode::OK);
    let items = q["items"].as_array().unwrap();
    assert_eq!(items.len(), 3);
    for item in items {
        assert_eq!(item["status"], "pending");
        assert!(item["verdict"] == "id" || item["verdict"] == "ood");
        // ground truth stays on the server
        assert!(item.get("is_id").is_none() && item.get("class_id").is_none());
    }
}

#[tokio::test]
async fn feedback_is_exactly_once() {
    let tmp = tempfile::tempdir().unwrap();
    let app = router(fixture(tmp.path()), None);
    let item = queue_ids(&app).await[0];

    let (code, first) = answer(&app, item, "accept").await;
    assert_eq!(code, StatusCode::OK);
    assert_eq!(first["resolved"], first["model_verdict"]);
    let (code, second) = answer(&app, item, "reject").await;
    assert_eq!(code, StatusCode::CONFLICT);
    assert_eq!(second["code"], "already_answered");
    assert!(second["message"].is_string());

    let (_, s) = call(&app, "GET", "/api/status", None).await;
    assert_eq!(s["ledger_size"], 1);
    assert!(!queue_ids(&app).await.contains(&item));

    let ledger = std::fs::read_to_string(tmp.path().join(RunDir::LEDGER)).unwrap();
    assert_eq!(ledger.lines().count(), 1);
}

#[tokio::test]
async fn reject_flips_the_verdict() {
    let tmp = tempfile::tempdir().unwrap();
    let app = router(fixture(tmp.path()), None);
    let item = queue_ids(&app).await[0];
    let (code, r) = answer(&app, item, "reject").await;
    assert_eq!(code, StatusCode::OK);
    assert_ne!(r["resolved"], r["model_verdict"]);
}

#[tokio::test]
async fn bad_requests_carry_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let app = router(fixture(tmp.path()), None);

    let (code, e) = answer(&app, 999_999, "accept").await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    assert_eq!(e["code"], "unknown_item");

    for body in ["not json", r#"{"item_id": 1}"#, r#"{"item_id": 1, "verdict": "maybe"}"#, r#"{"item_id": -1, "verdict": "accept"}"#] {
        let (code, e) = call(&app, "POST", "/api/feedback", Some(body)).await;
        assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
        assert_eq!(e["code"], "malformed_request");
    }

    let (code, _) = call(&app, "GET", "/api/queue?limit=lots", None).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let (code, _) = call(&app, "GET", "/api/scores/histogram?method=nope", None).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let (code, _) = call(&app, "GET", "/api/scores/histogram?group=nowhere", None).await;
    assert_eq!(code, StatusCode::UNPROCESSABLE_ENTITY);
    let (code, e) = call(&app, "GET", "/api/nothing", None).await;
    assert_eq!(code, StatusCode::NOT_FOUND);
    assert_eq!(e["code"], "not_found");

    let (_, s) = call(&app, "GET", "/api/status", None).await;
    assert_eq!(s["ledger_size"], 0);
}

#[tokio::test]
async fn drain_then_train_adds_one_row_per_group() {
    let tmp = tempfile::tempdir().unwrap();
    let app = router(fixture(tmp.path()), None);
    let (_, before) = call(&app, "GET", "/api/sessions/history", None).await;
    let before = before["rows"].as_array().unwrap().len();

    let ids = queue_ids(&app).await;
    for (k, id) in ids.iter().enumerate() {
        let (code, _) = answer(&app, *id, if k % 3 == 0 { "reject" } else { "accept" }).await;
        assert_eq!(code, StatusCode::OK);
    }
    assert!(queue_ids(&app).await.is_empty());

    let (code, t) = call(&app, "POST", "/api/sessions/train", None).await;
    assert_eq!(code, StatusCode::OK, "{t}");
    assert_eq!(t["session"], 1);
    let (_, after) = call(&app, "GET", "/api/sessions/history", None).await;
    let rows = after["rows"].as_array().unwrap();
    assert_eq!(rows.len(), before + 2);
    assert_eq!(&rows[before..], t["rows"].as_array().unwrap().as_slice());

    let (_, s) = call(&app, "GET", "/api/status", None).await;
    assert_eq!(s["session_index"], 2);
    assert_eq!(s["pending_feedback"], 0);
    assert_eq!(s["replay_size"].as_u64().unwrap() as usize, s["ledger_size"].as_u64().unwrap() as usize + rows_g0(&tmp));
    // the next group is out for review
    assert!(!queue_ids(&app).await.is_empty());
}

fn rows_g0(tmp: &tempfile::TempDir) -> usize {
    let run = RunDir::new(tmp.path());
    let ds = run.load_dataset().unwrap();
    run.load_benchmark(&ds).unwrap().groups[0].len()
}

#[tokio::test]
async fn second_session_while_training_is_409() {
    let tmp = tempfile::tempdir().unwrap();
    let svc = fixture(tmp.path());
    let app = router(svc.clone(), None);
    let guard = svc.begin_training().unwrap();
    let (code, e) = call(&app, "POST", "/api/sessions/train", None).await;
    assert_eq!(code, StatusCode::CONFLICT);
    assert_eq!(e["code"], "session_running");
    let (_, s) = call(&app, "GET", "/api/status", None).await;
    assert_eq!(s["training"], true);
    drop(guard);
    let (code, _) = call(&app, "POST", "/api/sessions/train", None).await;
    assert_eq!(code, StatusCode::OK);
}

#[tokio::test]
async fn histogram_counts_every_record() {
    let tmp = tempfile::tempdir().unwrap();
    let app = router(fixture(tmp.path()), None);
    for uri in [
        "/api/scores/histogram",
        "/api/scores/histogram?group=seen&method=iconp",
        "/api/scores/histogram?group=holdout&method=maxlogit&bins=7",
        "/api/scores/histogram?method=energy",
    ] {
        let (code, h) = call(&app, "GET", uri, None).await;
        assert_eq!(code, StatusCode::OK, "{uri}");
        let sum = |k: &str| h[k].as_array().unwrap().iter().map(|v| v.as_u64().unwrap()).sum::<u64>();
        assert_eq!(sum("id_counts"), h["n_id"].as_u64().unwrap());
        assert_eq!(sum("ood_counts"), h["n_ood"].as_u64().unwrap());
    }
    let (_, h) = call(&app, "GET", "/api/scores/histogram?bins=7", None).await;
    assert_eq!(h["id_counts"].as_array().unwrap().len(), 7);
}

#[tokio::test]
async fn reads_leave_state_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let app = router(fixture(tmp.path()), None);
    let state_file = tmp.path().join(RunDir::STATE);
    let before = std::fs::read(&state_file).unwrap();
    for uri in ["/api/status", "/api/queue", "/api/sessions/history", "/api/scores/histogram?group=seen"] {
        call(&app, "GET", uri, None).await;
    }
    assert_eq!(std::fs::read(&state_file).unwrap(), before);
}

#[tokio::test]
async fn static_assets_are_served() {
    let tmp = tempfile::tempdir().unwrap();
    let assets = tempfile::tempdir().unwrap();
    std::fs::write(assets.path().join("index.html"), "<html>console</html>").unwrap();
    let app = router(fixture(tmp.path()), Some(assets.path().to_path_buf()));
    let resp = app
        .oneshot(Request::builder().uri("/index.html").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..], b"<html>console</html>");
}
