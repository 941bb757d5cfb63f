//! HTTP feedback service.
//!
//! Every record of the group currently out for annotation is a queue item;
//! the item id is the record index. Ground truth never leaves the server.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::rejection::QueryRejection;
use axum::extract::{Query, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use ond_core::benchkit::Benchmark;
use ond_core::evalkit::{baseline_scores, histogram, model_score, Baseline, EvalReport, ScoreSet, HISTOGRAM_BINS};
use ond_core::featurestore::Dataset;
use ond_core::looprunner::{
    ingest_human_feedback, run_session, Answer, FeedbackInput, RunDir, SessionState, Verdict, SEEN_GROUP,
};
use ond_core::optim::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::json;
use tower_http::services::ServeDir;

pub struct Service {
    run: RunDir,
    dataset: Dataset,
    bench: Benchmark,
    cfg: TrainConfig,
    state: Mutex<SessionState>,
    training: AtomicBool,
}

pub type Shared = Arc<Service>;

impl Service {
    /// Loads a trained run. If nothing is out for annotation, the next
    /// unconsumed group is served.
    pub fn open(run: RunDir) -> anyhow::Result<Self> {
        let dataset = run.load_dataset()?;
        let bench = run.load_benchmark(&dataset)?;
        let cfg = run.load_config()?;
        let mut state = run.load_state()?;
        if state.awaiting.is_empty() && state.pending.is_empty() && state.open_next_group(&dataset, &bench)?.is_some() {
            run.save_state(&state)?;
        }
        Ok(Self {
            run,
            dataset,
            bench,
            cfg,
            state: Mutex::new(state),
            training: AtomicBool::new(false),
        })
    }

    fn state(&self) -> MutexGuard<'_, SessionState> {
        // A panic mid-update leaves nothing half-written in memory that
        // the disk copy does not also have, so a poisoned lock is usable.
        self.state.lock().unwrap_or_else(|e| e.into_inner())
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
        Self {
            status,
            code,
            message: message.into(),
        }
    }

    fn unprocessable(message: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "malformed_request", message)
    }
}

impl From<ond_core::Error> for ApiError {
    fn from(e: ond_core::Error) -> Self {
        use ond_core::Error as E;
        let (status, code) = match &e {
            E::UnknownRecord(_) => (StatusCode::NOT_FOUND, "unknown_item"),
            E::DuplicateFeedback(_) => (StatusCode::CONFLICT, "already_answered"),
            E::NoCheckpoint(_) => (StatusCode::CONFLICT, "no_checkpoint"),
            E::GroupConsumed(_) => (StatusCode::CONFLICT, "group_consumed"),
            _ => (StatusCode::INTERNAL_SERVER_ERROR, "internal"),
        };
        Self::new(status, code, e.to_string())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(json!({ "code": self.code, "message": self.message }))).into_response()
    }
}

impl From<QueryRejection> for ApiError {
    fn from(e: QueryRejection) -> Self {
        Self::unprocessable(e.body_text())
    }
}

type ApiResult<T> = Result<Json<T>, ApiError>;

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct Status {
    pub method: String,
    /// Index the next session will get.
    pub session_index: usize,
    pub sessions_completed: usize,
    pub replay_size: usize,
    pub ledger_size: usize,
    pub queue_size: usize,
    /// Answered, not yet trained on.
    pub pending_feedback: usize,
    pub training: bool,
}

async fn status(State(svc): State<Shared>) -> ApiResult<Status> {
    let s = svc.state();
    Ok(Json(Status {
        method: s.method.to_string(),
        session_index: s.next_session(),
        sessions_completed: s.sessions_completed,
        replay_size: s.replay.len(),
        ledger_size: s.ledger.len(),
        queue_size: s.awaiting.len(),
        pending_feedback: s.pending.len(),
        training: svc.training.load(Ordering::SeqCst),
    }))
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct QueueItem {
    pub item_id: usize,
    pub record: usize,
    pub verdict: Verdict,
    pub score: f64,
    pub image_id: u64,
    pub bbox: [f32; 4],
    pub status: String,
}

#[derive(Debug, Deserialize)]
struct QueueParams {
    limit: Option<usize>,
}

async fn queue(
    State(svc): State<Shared>,
    params: Result<Query<QueueParams>, QueryRejection>,
) -> ApiResult<serde_json::Value> {
    let Query(params) = params?;
    let s = svc.state();
    let items: Vec<QueueItem> = s
        .awaiting
        .values()
        .take(params.limit.unwrap_or(usize::MAX))
        .map(|p| {
            let r = &svc.dataset.records[p.record];
            QueueItem {
                item_id: p.record,
                record: p.record,
                verdict: p.verdict,
                score: p.score,
                image_id: r.image_id,
                bbox: r.bbox,
                status: "pending".into(),
            }
        })
        .collect();
    Ok(Json(json!({ "items": items })))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeedbackBody {
    item_id: usize,
    verdict: Answer,
}

async fn feedback(State(svc): State<Shared>, body: Bytes) -> ApiResult<serde_json::Value> {
    let body: FeedbackBody =
        serde_json::from_slice(&body).map_err(|e| ApiError::unprocessable(format!("feedback body: {e}")))?;
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .ok();
    let mut s = svc.state();
    let written = ingest_human_feedback(
        &mut s,
        &[FeedbackInput {
            record: body.item_id,
            answer: body.verdict,
        }],
        now,
    )?;
    svc.run.save_state(&s)?;
    let f = &written[0];
    Ok(Json(json!({
        "item_id": f.record,
        "model_verdict": f.model_verdict,
        "answer": f.answer,
        "resolved": f.resolved,
        "ledger_size": s.ledger.len(),
    })))
}

/// Held while a session trains; dropping it frees the slot.
pub struct TrainingGuard<'a>(&'a AtomicBool);

impl Drop for TrainingGuard<'_> {
    fn drop(&mut self) {
        self.0.store(false, Ordering::SeqCst);
    }
}

impl Service {
    /// Claims the single training slot, or `None` if a session is running.
    pub fn begin_training(&self) -> Option<TrainingGuard<'_>> {
        self.training
            .compare_exchange(false, true, Ordering::SeqCst, Ordering::SeqCst)
            .ok()
            .map(|_| TrainingGuard(&self.training))
    }
}

fn train_blocking(svc: &Service) -> Result<Vec<EvalReport>, ApiError> {
    let _guard = svc
        .begin_training()
        .ok_or_else(|| ApiError::new(StatusCode::CONFLICT, "session_running", "a training session is already running"))?;
    let snapshot = svc.state().clone();
    let trained = run_session(&snapshot, &svc.dataset, &svc.bench, &svc.cfg)?;

    // Feedback may have arrived while training; keep it for the next round.
    let mut live = svc.state();
    let mut next = trained;
    next.ledger = live.ledger.clone();
    next.pending = live.pending[snapshot.pending.len()..].to_vec();
    next.awaiting = live.awaiting.clone();
    if next.awaiting.is_empty() {
        next.open_next_group(&svc.dataset, &svc.bench)?;
    }
    svc.run.save_state(&next)?;
    let new_rows = next.history[snapshot.history.len()..].to_vec();
    *live = next;
    Ok(new_rows)
}

async fn train(State(svc): State<Shared>) -> ApiResult<serde_json::Value> {
    let rows = tokio::task::spawn_blocking(move || train_blocking(&svc))
        .await
        .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))??;
    Ok(Json(json!({ "session": rows.first().map(|r| r.session), "rows": rows })))
}

async fn history(State(svc): State<Shared>) -> ApiResult<serde_json::Value> {
    let s = svc.state();
    Ok(Json(json!({ "rows": s.history })))
}

#[derive(Debug, Deserialize)]
struct HistogramParams {
    group: Option<String>,
    method: Option<String>,
    bins: Option<usize>,
}

fn score_set(svc: &Service, group: &str, method: Option<&str>) -> Result<ScoreSet, ApiError> {
    let s = svc.state();
    let g = match group {
        "holdout" => svc.bench.holdout.clone(),
        SEEN_GROUP => s.seen_group(&svc.bench),
        other => return Err(ApiError::unprocessable(format!("unknown group {other:?}; use holdout or seen"))),
    };
    let learned = s.method.to_string();
    let method = method.unwrap_or(&learned);
    if method == learned {
        return Ok(model_score(&s.model, &svc.dataset, &g.records(), learned.clone(), group)?);
    }
    let baseline: Baseline = method
        .parse()
        .map_err(|_| ApiError::unprocessable(format!("unknown method {method:?}")))?;
    Ok(baseline_scores(&svc.dataset, &g.id_records, &g.ood_records, baseline, group)?)
}

async fn scores_histogram(
    State(svc): State<Shared>,
    params: Result<Query<HistogramParams>, QueryRejection>,
) -> ApiResult<serde_json::Value> {
    let Query(params) = params?;
    let bins = params.bins.unwrap_or(HISTOGRAM_BINS);
    if !(1..=1000).contains(&bins) {
        return Err(ApiError::unprocessable("bins must be in 1..=1000"));
    }
    let group = params.group.as_deref().unwrap_or("holdout");
    let scores = score_set(&svc, group, params.method.as_deref())?;
    let h = histogram(&scores, bins)?;
    Ok(Json(json!({
        "group": scores.group,
        "method": scores.method,
        "n_id": scores.id_scores.len(),
        "n_ood": scores.ood_scores.len(),
        "lo": h.lo,
        "hi": h.hi,
        "id_counts": h.id_counts,
        "ood_counts": h.ood_counts,
    })))
}

async fn not_found() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(svc: Shared, static_dir: Option<PathBuf>) -> Router {
    let api = Router::new()
        .route("/api/status", get(status))
        .route("/api/queue", get(queue))
        .route("/api/feedback", post(feedback))
        .route("/api/sessions/train", post(train))
        .route("/api/sessions/history", get(history))
        .route("/api/scores/histogram", get(scores_histogram))
        .with_state(svc);
    match static_dir {
        Some(dir) => api.fallback_service(ServeDir::new(dir)),
        None => api.fallback(not_found),
    }
}
