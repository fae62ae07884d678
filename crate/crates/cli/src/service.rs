//! HTTP+JSON facade over the review queue, images, predictions, CAM
//! overlays and dataset statistics.

use std::collections::{BTreeMap, HashMap};
use std::io::Cursor;
use std::sync::{Arc, Mutex, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use image::{DynamicImage, ImageFormat};
use serde::Deserialize;
use serde_json::{json, Value};
use tokio::sync::Semaphore;

use iconoforge::curate::apply_decision;
use iconoforge::dataset::{class_counts, cooccurrence, Split};
use iconoforge::explain::{compute_cam, render_overlay, DEFAULT_ALPHA};
use iconoforge::model::{Prediction, TrainedModel};
use iconoforge::pipeline::{load_record_image, load_splits};
use iconoforge::refine::accept_proposal;
use iconoforge::review::{now_timestamp, Decision, ReviewItem, ReviewKind, ReviewStatus};
use iconoforge::store::Store;
use iconoforge::{Error, IconClass};

pub const DEFAULT_PORT: u16 = 8630;
pub const DEFAULT_QUEUE_LIMIT: usize = 50;
pub const MAX_QUEUE_LIMIT: usize = 500;
const INFERENCE_SLOTS: usize = 2;

pub struct AppState {
    store: RwLock<Store>,
    model: Option<Arc<TrainedModel>>,
    threshold: f64,
    inference: Semaphore,
    predictions: Mutex<HashMap<String, Arc<Prediction>>>,
}

impl AppState {
    pub fn new(store: Store, model: Option<TrainedModel>, threshold: f64) -> Arc<Self> {
        Arc::new(AppState {
            store: RwLock::new(store),
            model: model.map(Arc::new),
            threshold,
            inference: Semaphore::new(INFERENCE_SLOTS),
            predictions: Mutex::new(HashMap::new()),
        })
    }

    pub fn store(&self) -> std::sync::RwLockReadGuard<'_, Store> {
        self.store.read().expect("store lock")
    }
}

#[derive(Debug)]
pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not_found", message)
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        let (status, code) = match &e {
            Error::UnknownItem(_) => (StatusCode::NOT_FOUND, "unknown_item"),
            Error::UnknownRecord(_) => (StatusCode::NOT_FOUND, "unknown_record"),
            Error::UnknownClass(_) => (StatusCode::NOT_FOUND, "unknown_class"),
            Error::AlreadyDecided(_) => (StatusCode::CONFLICT, "already_decided"),
            Error::RecordNotActive { .. } => (StatusCode::CONFLICT, "record_not_active"),
            Error::UntrainedModel => (StatusCode::CONFLICT, "model_not_trained"),
            Error::MalformedPayload { .. } => (StatusCode::UNPROCESSABLE_ENTITY, "malformed_payload"),
            Error::InvalidArgument(_) => (StatusCode::BAD_REQUEST, "invalid_argument"),
            Error::Image(_) => (StatusCode::NOT_FOUND, "image_unavailable"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        ApiError::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/queue", get(queue))
        .route("/api/items/{id}", get(item))
        .route("/api/items/{id}/decision", post(decide))
        .route("/api/images/{*file}", get(image_jpeg))
        .route("/api/predictions/{*record_id}", get(prediction))
        .route("/api/cam/{*path}", get(cam_png))
        .route("/api/stats", get(stats))
        .fallback(|| async { ApiError::not_found("no such endpoint") })
        .with_state(state)
}

pub fn image_link(record_id: &str) -> String {
    format!("/api/images/{}.jpg", iconoforge::refine::encode_path(record_id))
}

fn summary(item: &ReviewItem) -> Value {
    json!({
        "item_id": item.item_id,
        "kind": item.kind,
        "status": item.status,
        "subject_ids": item.subject_ids,
        "images": item.subject_ids.iter().map(|id| image_link(id)).collect::<Vec<_>>(),
        "evidence": item.evidence,
    })
}

#[derive(Debug, Deserialize)]
struct QueueQuery {
    kind: Option<String>,
    status: Option<String>,
    limit: Option<usize>,
    cursor: Option<String>,
}

async fn queue(State(state): State<Arc<AppState>>, Query(q): Query<QueueQuery>) -> ApiResult<Json<Value>> {
    let kind = match q.kind.as_deref().filter(|s| !s.is_empty()) {
        None => None,
        Some(s) => Some(ReviewKind::parse(s).ok_or_else(|| ApiError::bad_request(format!("unknown kind {s:?}")))?),
    };
    let status = match q.status.as_deref().filter(|s| !s.is_empty()) {
        None => ReviewStatus::Pending,
        Some(s) => ReviewStatus::parse(s).ok_or_else(|| ApiError::bad_request(format!("unknown status {s:?}")))?,
    };
    let limit = q.limit.unwrap_or(DEFAULT_QUEUE_LIMIT);
    if limit == 0 || limit > MAX_QUEUE_LIMIT {
        return Err(ApiError::bad_request(format!("limit must be in 1..={MAX_QUEUE_LIMIT}")));
    }
    let store = state.store();
    let items = &store.state().items;
    let of_kind = |i: &&ReviewItem| kind.is_none_or(|k| i.kind == k);
    let total_pending = items.values().filter(of_kind).filter(|i| i.is_pending()).count();
    // the cursor is the last item id handed out; ids are unique and ordered
    let after = q.cursor.unwrap_or_default();
    let mut page: Vec<&ReviewItem> = items
        .range::<String, _>((std::ops::Bound::Excluded(&after), std::ops::Bound::Unbounded))
        .map(|(_, i)| i)
        .filter(of_kind)
        .filter(|i| i.status == status)
        .take(limit + 1)
        .collect();
    let more = page.len() > limit;
    page.truncate(limit);
    let next_cursor = more.then(|| page.last().map(|i| i.item_id.clone())).flatten();
    Ok(Json(json!({
        "items": page.iter().map(|i| summary(i)).collect::<Vec<_>>(),
        "total_pending": total_pending,
        "next_cursor": next_cursor,
    })))
}

fn item_detail(store: &Store, item: &ReviewItem) -> Value {
    let st = store.state();
    let subjects: Vec<Value> = item
        .subject_ids
        .iter()
        .map(|id| {
            let r = st.records.get(id);
            json!({
                "record_id": id,
                "title": r.map(|r| r.title.as_str()),
                "status": r.map(|r| r.status),
                "width": r.and_then(|r| r.width),
                "height": r.and_then(|r| r.height),
                "labels": st.annotation(id).map(|a| a.classes().map(|c| c.code()).collect::<Vec<_>>()).unwrap_or_default(),
                "image": image_link(id),
            })
        })
        .collect();
    json!({
        "item_id": item.item_id,
        "kind": item.kind,
        "status": item.status,
        "subject_ids": item.subject_ids,
        "evidence": item.evidence,
        "decision_payload": item.decision_payload,
        "decided_at": item.decided_at,
        "subjects": subjects,
    })
}

async fn item(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    let store = state.store();
    let item = store.state().items.get(&id).ok_or_else(|| Error::UnknownItem(id.clone()))?;
    Ok(Json(item_detail(&store, item)))
}

#[derive(Debug, Deserialize)]
struct DecisionBody {
    decision: String,
    #[serde(default)]
    payload: Option<Value>,
}

/// First pending item after `after`, preferring the same kind.
fn next_pending<'a>(store: &'a Store, kind: ReviewKind, after: &str) -> Option<&'a ReviewItem> {
    let items = &store.state().items;
    let pending = || items.values().filter(|i| i.is_pending());
    pending()
        .find(|i| i.kind == kind && i.item_id.as_str() > after)
        .or_else(|| pending().find(|i| i.kind == kind))
        .or_else(|| pending().next())
}

async fn decide(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<DecisionBody>, JsonRejection>,
) -> ApiResult<Json<Value>> {
    let Json(body) = body.map_err(|e| ApiError::bad_request(e.body_text()))?;
    let decision = Decision::parse(&body.decision)
        .ok_or_else(|| ApiError::bad_request(format!("decision must be accept or reject, got {:?}", body.decision)))?;
    let payload = body.payload.filter(|p| !p.is_null());
    let mut store = state.store.write().expect("store lock");
    let item = store.state().items.get(&id).cloned().ok_or_else(|| Error::UnknownItem(id.clone()))?;
    let noop = if item.is_pending() {
        let at = now_timestamp();
        if item.kind == ReviewKind::LabelProposal && decision == Decision::Accept && payload.is_none() {
            accept_proposal(&mut store, &id, &at)?;
        } else {
            apply_decision(&mut store, &id, decision, payload, &at)?;
        }
        false
    } else {
        let wanted = match decision {
            Decision::Accept => ReviewStatus::Accepted,
            _ => ReviewStatus::Rejected,
        };
        if item.status != wanted || item.decision_payload != payload {
            return Err(ApiError::new(
                StatusCode::CONFLICT,
                "conflicting_decision",
                format!("item {id} was already {} with a different decision", item.status.as_str()),
            ));
        }
        true
    };
    let current = &store.state().items[&id];
    let next = next_pending(&store, item.kind, &id).map(summary);
    Ok(Json(json!({ "item": summary(current), "noop": noop, "next": next })))
}

fn strip_suffix<'a>(file: &'a str, ext: &str) -> ApiResult<&'a str> {
    file.strip_suffix(ext)
        .filter(|s| !s.is_empty())
        .ok_or_else(|| ApiError::not_found(format!("expected a {ext} path")))
}

fn encode(image: DynamicImage, format: ImageFormat) -> ApiResult<Vec<u8>> {
    let mut buf = Cursor::new(Vec::new());
    image
        .write_to(&mut buf, format)
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "encode_failed", e.to_string()))?;
    Ok(buf.into_inner())
}

fn stored_image(state: &AppState, record_id: &str) -> ApiResult<DynamicImage> {
    let store = state.store();
    if !store.state().records.contains_key(record_id) {
        return Err(Error::UnknownRecord(record_id.to_string()).into());
    }
    Ok(load_record_image(&store, record_id)?)
}

async fn image_jpeg(State(state): State<Arc<AppState>>, Path(file): Path<String>) -> ApiResult<Response> {
    let id = strip_suffix(&file, ".jpg")?;
    let img = stored_image(&state, id)?;
    let bytes = encode(DynamicImage::ImageRgb8(img.to_rgb8()), ImageFormat::Jpeg)?;
    Ok(([(header::CONTENT_TYPE, "image/jpeg")], bytes).into_response())
}

fn require_model(state: &AppState) -> ApiResult<Arc<TrainedModel>> {
    state.model.clone().ok_or_else(|| {
        ApiError::new(
            StatusCode::CONFLICT,
            "model_not_loaded",
            "no model is loaded; start the service with --model",
        )
    })
}

/// Predicts a stored record, reusing cached results. At most a few
/// inferences run at once.
async fn predict_record(state: Arc<AppState>, record_id: String) -> ApiResult<Arc<Prediction>> {
    let model = require_model(&state)?;
    if let Some(p) = state.predictions.lock().expect("cache lock").get(&record_id) {
        return Ok(p.clone());
    }
    let img = stored_image(&state, &record_id)?;
    let _permit = state.inference.acquire().await.expect("semaphore open");
    let threshold = state.threshold;
    let id = record_id.clone();
    let pred = tokio::task::spawn_blocking(move || model.predict_image(&id, &img, threshold))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    let pred = Arc::new(pred);
    state.predictions.lock().expect("cache lock").insert(record_id, pred.clone());
    Ok(pred)
}

async fn prediction(State(state): State<Arc<AppState>>, Path(record_id): Path<String>) -> ApiResult<Json<Value>> {
    let p = predict_record(state.clone(), record_id.clone()).await?;
    let scores: BTreeMap<&str, f64> = IconClass::ALL.iter().map(|c| (c.code(), p.score(*c))).collect();
    let cams: BTreeMap<&str, String> = IconClass::ALL
        .iter()
        .map(|c| (c.code(), iconoforge::refine::cam_ref(&record_id, *c)))
        .collect();
    Ok(Json(json!({
        "record_id": record_id,
        "scores": scores,
        "predicted": p.predicted.map(|c| c.code()),
        "top_class": p.top_class().code(),
        "threshold": p.threshold,
        "model": state.model.as_ref().map(|m| m.checkpoint_id()),
        "cam": cams,
    })))
}

#[derive(Debug, Deserialize)]
struct CamQuery {
    alpha: Option<f64>,
}

async fn cam_png(
    State(state): State<Arc<AppState>>,
    Path(path): Path<String>,
    Query(q): Query<CamQuery>,
) -> ApiResult<Response> {
    require_model(&state)?;
    let (record_id, file) = path
        .rsplit_once('/')
        .ok_or_else(|| ApiError::not_found("expected /api/cam/{record_id}/{class_code}.png"))?;
    let code = strip_suffix(file, ".png")?;
    let class = IconClass::parse(code).ok_or_else(|| Error::UnknownClass(code.to_string()))?;
    let alpha = q.alpha.unwrap_or(DEFAULT_ALPHA);
    if !(0.0..=1.0).contains(&alpha) {
        return Err(ApiError::bad_request(format!("alpha {alpha} outside [0,1]")));
    }
    let pred = predict_record(state.clone(), record_id.to_string()).await?;
    let cam = compute_cam(&pred, class)?;
    let img = stored_image(&state, record_id)?.to_rgb8();
    let fill = state.model.as_ref().expect("model checked").config.channel_stats.mean_rgb8();
    let overlay = render_overlay(&img, &cam, alpha, fill)?;
    let bytes = encode(DynamicImage::ImageRgb8(overlay), ImageFormat::Png)?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}

async fn stats(State(state): State<Arc<AppState>>) -> Json<Value> {
    Json(dataset_stats(&state.store(), true))
}

/// Class counts, split sizes, pending review counts and optionally the
/// co-occurrence matrix of the active records.
pub fn dataset_stats(store: &Store, with_cooccurrence: bool) -> Value {
    let st = store.state();
    let annotations = st.active_annotations();
    let counts = class_counts(&annotations);
    let class_counts: BTreeMap<&str, usize> = IconClass::ALL.iter().map(|c| (c.code(), counts[c.index()])).collect();
    let co_rows = with_cooccurrence.then(|| {
        let co = cooccurrence(&annotations);
        IconClass::ALL
            .iter()
            .map(|x| (x.code(), IconClass::ALL.iter().map(|y| (y.code(), co.get(*x, *y))).collect()))
            .collect::<BTreeMap<&str, BTreeMap<&str, f64>>>()
    });
    let split_sizes = load_splits(store).ok().map(|splits| {
        let mut sizes: BTreeMap<String, usize> = Split::ALL.iter().map(|s| (s.to_string(), 0)).collect();
        for a in splits.iter().filter(|a| st.records.get(&a.record_id).is_some_and(|r| r.is_active())) {
            *sizes.entry(a.split.to_string()).or_default() += 1;
        }
        sizes
    });
    let pending: BTreeMap<&str, usize> = ReviewKind::ALL
        .iter()
        .map(|k| (k.as_str(), st.pending_items().filter(|i| i.kind == *k).count()))
        .collect();
    json!({
        "records": {
            "total": st.records.len(),
            "active": st.active_records().count(),
            "unlabeled": annotations.iter().filter(|a| a.is_empty()).count(),
        },
        "class_counts": class_counts,
        "cooccurrence": co_rows,
        "split_sizes": split_sizes,
        "pending": pending,
        "label_revision": st.label_revision,
    })
}

/// Binds the listening socket.
pub fn bind(addr: std::net::SocketAddr) -> anyhow::Result<std::net::TcpListener> {
    let listener = std::net::TcpListener::bind(addr).map_err(|e| anyhow::anyhow!("cannot bind {addr}: {e}"))?;
    listener.set_nonblocking(true)?;
    Ok(listener)
}

/// Serves until ctrl-c. Every decision is appended and flushed before its
/// response is sent, so shutdown loses nothing.
pub async fn serve(state: Arc<AppState>, listener: std::net::TcpListener) -> anyhow::Result<()> {
    let listener = tokio::net::TcpListener::from_std(listener)?;
    eprintln!("serving on http://{}", listener.local_addr()?);
    axum::serve(listener, router(state))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
    Ok(())
}
