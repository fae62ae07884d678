use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

use iconoforge::curate::DEFAULT_NEAR_DUP_THRESHOLD;
use iconoforge::fixture::{make_synthetic_fixture, FixtureOptions, FIXTURE_SOURCE};
use iconoforge::ingest::{ingest, load_manifest, LocalFetcher};
use iconoforge::model::{sigmoid, Backbone, ModelConfig, TrainedModel};
use iconoforge::refine::{cam_ref, enqueue_proposals, LabelProposal};
use iconoforge::review::{ReviewItem, ReviewKind};
use iconoforge::store::{AutoAction, Store};
use iconoforge::IconClass;
use iconoforge_cli::service::{router, AppState};

struct Env {
    _tmp: TempDir,
    dir: std::path::PathBuf,
    ids: Vec<String>,
    pairs: Vec<String>,
}

/// Ingested 10-per-class fixture with five near-duplicate pairs queued.
fn env() -> (Env, Store) {
    let tmp = tempfile::tempdir().unwrap();
    let fx = make_synthetic_fixture(&tmp.path().join("fx"), &FixtureOptions::new(10, 4)).unwrap();
    let dir = tmp.path().join("store");
    let mut store = Store::open(&dir).unwrap();
    let manifest = load_manifest(&fx.manifest_path(), FIXTURE_SOURCE).unwrap();
    let images = store.images_dir().unwrap();
    ingest(&mut store, &manifest, &LocalFetcher { base_dir: fx.dir.clone() }, &images).unwrap();
    let ids: Vec<String> = store.state().records.keys().cloned().collect();
    let items: Vec<ReviewItem> = (0..5)
        .map(|i| {
            ReviewItem::new(ReviewKind::NearDupPair, vec![ids[2 * i].clone(), ids[2 * i + 1].clone()], "")
                .with_evidence("hamming_distance", DEFAULT_NEAR_DUP_THRESHOLD)
        })
        .collect();
    let mut pairs: Vec<String> = items.iter().map(|i| i.item_id.clone()).collect();
    pairs.sort();
    store.enqueue(items).unwrap();
    (
        Env {
            _tmp: tmp,
            dir,
            ids,
            pairs,
        },
        store,
    )
}

fn random_model() -> TrainedModel {
    let config = ModelConfig {
        input_size: 64,
        ..ModelConfig::tiny()
    };
    let bb = Backbone::new(&config.backbone, &mut ChaCha8Rng::seed_from_u64(9));
    TrainedModel::from_backbone(config, bb).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, String, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let ctype = resp
        .headers()
        .get("content-type")
        .map(|v| v.to_str().unwrap().to_string())
        .unwrap_or_default();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, ctype, bytes)
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (status, _, bytes) = call(app, method, uri, body).await;
    (status, serde_json::from_slice(&bytes).unwrap())
}

fn assert_error(v: &Value, code: &str) {
    assert_eq!(v["code"], code, "{v}");
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()), "{v}");
}

#[tokio::test]
async fn queue_pages_by_cursor() {
    let (env, store) = env();
    let app = router(AppState::new(store, None, 0.5));
    let (status, page) = call_json(&app, "GET", "/api/queue?kind=near_dup_pair&limit=2", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(page["items"].as_array().unwrap().len(), 2);
    assert_eq!(page["total_pending"], 5);
    let first = page["items"][0].clone();
    assert_eq!(first["kind"], "near_dup_pair");
    assert_eq!(first["images"][0], format!("/api/images/{}.jpg", first["subject_ids"][0].as_str().unwrap()));

    let mut seen = Vec::new();
    let mut cursor: Option<String> = None;
    loop {
        let uri = match &cursor {
            Some(c) => format!("/api/queue?kind=near_dup_pair&limit=2&cursor={c}"),
            None => "/api/queue?kind=near_dup_pair&limit=2".to_string(),
        };
        let (_, page) = call_json(&app, "GET", &uri, None).await;
        for item in page["items"].as_array().unwrap() {
            seen.push(item["item_id"].as_str().unwrap().to_string());
        }
        match page["next_cursor"].as_str() {
            Some(c) => cursor = Some(c.to_string()),
            None => break,
        }
    }
    assert_eq!(seen, env.pairs);

    let (_, other) = call_json(&app, "GET", "/api/queue?kind=fragment", None).await;
    assert_eq!(other["total_pending"], 0);
    assert!(other["next_cursor"].is_null());
    let (status, err) = call_json(&app, "GET", "/api/queue?kind=bogus", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&err, "bad_request");
    let (status, _) = call_json(&app, "GET", "/api/queue?limit=0", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn decisions_are_idempotent_and_logged() {
    let (env, store) = env();
    let state = AppState::new(store, None, 0.5);
    let app = router(state.clone());
    let id = env.pairs[0].clone();
    let (_, item) = call_json(&app, "GET", &format!("/api/items/{id}"), None).await;
    assert_eq!(item["status"], "pending");
    assert_eq!(item["subjects"].as_array().unwrap().len(), 2);
    let keep = item["subject_ids"][0].clone();
    let body = json!({ "decision": "accept", "payload": { "keep": keep } });

    let (status, resp) = call_json(&app, "POST", &format!("/api/items/{id}/decision"), Some(body.clone())).await;
    assert_eq!(status, StatusCode::OK, "{resp}");
    assert_eq!(resp["noop"], false);
    assert_eq!(resp["item"]["status"], "accepted");
    assert_eq!(resp["next"]["item_id"], env.pairs[1].as_str());

    let (_, page) = call_json(&app, "GET", "/api/queue?kind=near_dup_pair", None).await;
    assert_eq!(page["total_pending"], 4);
    assert!(page["items"].as_array().unwrap().iter().all(|i| i["item_id"] != id.as_str()));

    let (status, again) = call_json(&app, "POST", &format!("/api/items/{id}/decision"), Some(body)).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(again["noop"], true);
    let (status, err) = call_json(&app, "POST", &format!("/api/items/{id}/decision"), Some(json!({ "decision": "reject" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&err, "conflicting_decision");

    // a state visible over http equals the state replayed from disk
    let log = std::fs::read_to_string(env.dir.join("decisions.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let reopened = Store::open_existing(&env.dir).unwrap();
    assert_eq!(reopened.state().canonical_bytes(), state.store().state().canonical_bytes());
}

#[tokio::test]
async fn decision_errors_have_codes() {
    let (env, store) = env();
    let app = router(AppState::new(store, None, 0.5));
    let id = &env.pairs[0];
    let (status, err) = call_json(&app, "POST", "/api/items/nope/decision", Some(json!({ "decision": "accept" }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&err, "unknown_item");
    let (status, err) = call_json(&app, "POST", &format!("/api/items/{id}/decision"), Some(json!({ "decision": "maybe" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&err, "bad_request");
    let (status, err) = call_json(&app, "POST", &format!("/api/items/{id}/decision"), Some(json!({ "verdict": 1 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&err, "bad_request");
    let bad_keep = json!({ "decision": "accept", "payload": { "keep": "someone-else" } });
    let (status, err) = call_json(&app, "POST", &format!("/api/items/{id}/decision"), Some(bad_keep)).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_error(&err, "malformed_payload");
    let (status, err) = call_json(&app, "GET", "/api/items/nope", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&err, "unknown_item");
    let (status, err) = call_json(&app, "GET", "/api/nowhere", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&err, "not_found");
}

#[tokio::test]
async fn images_are_served_as_jpeg() {
    let (env, store) = env();
    let record = store.state().records[&env.ids[0]].clone();
    let app = router(AppState::new(store, None, 0.5));
    let (status, ctype, bytes) = call(&app, "GET", &format!("/api/images/{}.jpg", env.ids[0]), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype, "image/jpeg");
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Jpeg).unwrap();
    assert_eq!((Some(img.width()), Some(img.height())), (record.width, record.height));
    let (status, _, bytes) = call(&app, "GET", "/api/images/fixture/missing.jpg", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&serde_json::from_slice(&bytes).unwrap(), "unknown_record");
    let (status, _, _) = call(&app, "GET", &format!("/api/images/{}.png", env.ids[0]), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn model_endpoints_need_a_model() {
    let (env, store) = env();
    let app = router(AppState::new(store, None, 0.5));
    let (status, err) = call_json(&app, "GET", &cam_ref(&env.ids[0], IconClass::VirginMary), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&err, "model_not_loaded");
    let (status, err) = call_json(&app, "GET", &format!("/api/predictions/{}", env.ids[0]), None).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&err, "model_not_loaded");
}

#[tokio::test]
async fn predictions_and_cam_overlays() {
    let (env, store) = env();
    let model = random_model();
    let id = env.ids[3].clone();
    let expected = {
        let img = iconoforge::pipeline::load_record_image(&store, &id).unwrap();
        model.predict_image(&id, &img, 0.5).unwrap()
    };
    let app = router(AppState::new(store, Some(model), 0.5));
    let (status, pred) = call_json(&app, "GET", &format!("/api/predictions/{id}"), None).await;
    assert_eq!(status, StatusCode::OK, "{pred}");
    for c in IconClass::ALL {
        assert!((pred["scores"][c.code()].as_f64().unwrap() - expected.score(c)).abs() < 1e-12);
        assert_eq!(pred["cam"][c.code()], cam_ref(&id, c));
    }
    let mean: f64 = expected.class_map(IconClass::Paul).iter().sum::<f64>() / expected.class_map(IconClass::Paul).len() as f64;
    assert!((sigmoid(mean) - pred["scores"][IconClass::Paul.code()].as_f64().unwrap()).abs() < 1e-9);

    let (status, ctype, bytes) = call(&app, "GET", &format!("{}?alpha=0.3", cam_ref(&id, IconClass::Paul)), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ctype, "image/png");
    let overlay = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png).unwrap();
    assert_eq!(overlay.width(), overlay.height());
    let (_, _, zero) = call(&app, "GET", &format!("{}?alpha=0", cam_ref(&id, IconClass::Paul)), None).await;
    assert_ne!(zero, bytes);

    let (status, err) = call_json(&app, "GET", &format!("{}?alpha=2", cam_ref(&id, IconClass::VirginMary)), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&err, "bad_request");
    let (status, err) = call_json(&app, "GET", &format!("/api/cam/{id}/zz.png"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&err, "unknown_class");
    let (status, err) = call_json(&app, "GET", "/api/predictions/fixture/missing", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&err, "unknown_record");
}

#[tokio::test]
async fn proposal_decisions() {
    let (env, mut store) = env();
    let proposal = |i: usize| LabelProposal {
        record_id: env.ids[i].clone(),
        icon_class: IconClass::Dominic,
        confidence: 0.97,
        cam_ref: cam_ref(&env.ids[i], IconClass::Dominic),
        created_from: "test".into(),
    };
    let props = vec![proposal(20), proposal(21)];
    enqueue_proposals(&mut store, &props).unwrap();
    let items: Vec<String> = props.iter().map(|p| p.to_review_item().item_id).collect();
    // the second proposal's record disappears before review
    store
        .commit(
            AutoAction::RemoveFiltered {
                record_id: env.ids[21].clone(),
                reason: "test".into(),
            }
            .into_event("2024-01-01T00:00:00.000Z"),
        )
        .unwrap();
    let state = AppState::new(store, None, 0.5);
    let app = router(state.clone());

    let (_, page) = call_json(&app, "GET", "/api/queue?kind=label_proposal", None).await;
    assert_eq!(page["total_pending"], 2);
    assert_eq!(page["items"][0]["evidence"]["class"], IconClass::Dominic.code());

    let (status, resp) = call_json(&app, "POST", &format!("/api/items/{}/decision", items[0]), Some(json!({ "decision": "accept" }))).await;
    assert_eq!(status, StatusCode::OK, "{resp}");
    assert!(state.store().state().annotation(&env.ids[20]).unwrap().contains(IconClass::Dominic));

    let (status, err) = call_json(&app, "POST", &format!("/api/items/{}/decision", items[1]), Some(json!({ "decision": "accept" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&err, "record_not_active");
    let (_, voided) = call_json(&app, "GET", &format!("/api/items/{}", items[1]), None).await;
    assert_eq!(voided["status"], "rejected");
    assert!(voided["decision_payload"]["voided"].is_string());
    let (_, page) = call_json(&app, "GET", "/api/queue?kind=label_proposal", None).await;
    assert_eq!(page["total_pending"], 0);
}

#[tokio::test]
async fn stats_reflect_the_store() {
    let (_env, store) = env();
    let n = store.state().records.len();
    let state = AppState::new(store, None, 0.5);
    let app = router(state);
    let (status, stats) = call_json(&app, "GET", "/api/stats", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(stats["records"]["total"], n);
    assert_eq!(stats["pending"]["near_dup_pair"], 5);
    assert!(stats["split_sizes"].is_null());
    assert_eq!(stats["cooccurrence"].as_object().unwrap().len(), 10);
    assert_eq!(stats["label_revision"], 0);
}

#[tokio::test]
async fn concurrent_reads_and_writes() {
    let (env, store) = env();
    let state = AppState::new(store, None, 0.5);
    let app = router(state.clone());
    let mut handles = Vec::new();
    for (i, id) in env.pairs.iter().enumerate() {
        let app = app.clone();
        let id = id.clone();
        handles.push(tokio::spawn(async move {
            let body = json!({ "decision": if i % 2 == 0 { "accept" } else { "reject" } });
            let (s, _) = call_json(&app, "POST", &format!("/api/items/{id}/decision"), Some(body.clone())).await;
            let (r, _) = call_json(&app, "GET", "/api/queue", None).await;
            (s, r)
        }));
    }
    for h in handles {
        let (s, r) = h.await.unwrap();
        assert_eq!((s, r), (StatusCode::OK, StatusCode::OK));
    }
    let (_, page) = call_json(&app, "GET", "/api/queue", None).await;
    assert_eq!(page["total_pending"], 0);
    let reopened = Store::open_existing(&env.dir).unwrap();
    assert_eq!(reopened.state().canonical_bytes(), Arc::clone(&state).store().state().canonical_bytes());
}
