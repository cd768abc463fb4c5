//! Hand-labeling HTTP API.
//!
//! `GET /queue?labeler=&split=` hands out the next record a labeler has not
//! labeled, leasing it so concurrent labelers see different records.
//! `POST /labels` appends a label; `GET /progress?split=` reports counts.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::extract::{Query, Request, State};
use axum::http::{header, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use trialcensus_core::corpus::Corpus;
use trialcensus_core::labels::{
    label_stats, ExclusionReason, LabelError, LabelRecord, LabelStore, Split, SplitPlan, Verdict,
};

pub struct LabelService {
    store: Mutex<LabelStore>,
    plan: SplitPlan,
    corpus: Arc<Corpus>,
    token: Option<String>,
    lease: Duration,
    /// pmid → (labeler, expiry)
    leases: Mutex<HashMap<String, (String, Instant)>>,
}

impl LabelService {
    pub fn new(
        store: LabelStore,
        plan: SplitPlan,
        corpus: Arc<Corpus>,
        token: Option<String>,
        lease: Duration,
    ) -> Self {
        Self {
            store: Mutex::new(store),
            plan,
            corpus,
            token,
            lease,
            leases: Mutex::new(HashMap::new()),
        }
    }
}

#[derive(Debug, Deserialize)]
pub struct QueueQuery {
    pub labeler: String,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItem {
    pub pmid: String,
    pub split: Split,
    /// Position within the split, in draw order.
    pub position: usize,
    pub title: String,
    #[serde(rename = "abstract")]
    pub abstract_text: Option<String>,
    /// Records in the split this labeler has not labeled yet.
    pub remaining: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum QueueResponse {
    Item(QueueItem),
    Done { done: bool, remaining: usize },
}

/// Label submission. Without an explicit revision the labeler's next one is
/// used.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSubmission {
    pub pmid: String,
    pub verdict: Verdict,
    #[serde(default)]
    pub reason: Option<ExclusionReason>,
    pub labeler: String,
    #[serde(default)]
    pub revision: Option<u32>,
    #[serde(default)]
    pub note: Option<String>,
    /// Client clock; the server's is used when absent.
    #[serde(default)]
    pub timestamp: Option<DateTime<Utc>>,
}

#[derive(Debug, Deserialize)]
pub struct ProgressQuery {
    pub split: Split,
}

fn error(status: StatusCode, message: impl Into<String>) -> Response {
    (status, Json(json!({ "error": message.into() }))).into_response()
}

async fn queue(State(svc): State<Arc<LabelService>>, Query(q): Query<QueueQuery>) -> Response {
    if q.labeler.trim().is_empty() {
        return error(StatusCode::UNPROCESSABLE_ENTITY, "labeler is empty");
    }
    let done = svc.store.lock().labeled_by(&q.labeler);
    let now = Instant::now();
    let mut leases = svc.leases.lock();
    leases.retain(|_, (_, expiry)| *expiry > now);
    let open: Vec<(usize, &str)> = svc
        .plan
        .members(q.split)
        .enumerate()
        .filter(|(_, p)| !done.contains(*p))
        .collect();
    let remaining = open.len();
    // A labeler's own live lease comes first, so a reload returns the same record.
    let pick = open
        .iter()
        .find(|(_, p)| leases.get(*p).is_some_and(|(l, _)| *l == q.labeler))
        .or_else(|| open.iter().find(|(_, p)| !leases.contains_key(*p)));
    let Some(&(position, pmid)) = pick else {
        return Json(QueueResponse::Done {
            done: remaining == 0,
            remaining,
        })
        .into_response();
    };
    leases.insert(pmid.to_string(), (q.labeler.clone(), now + svc.lease));
    let record = svc.corpus.get(pmid);
    Json(QueueResponse::Item(QueueItem {
        pmid: pmid.to_string(),
        split: q.split,
        position,
        title: record.map(|r| r.title.clone()).unwrap_or_default(),
        abstract_text: record.and_then(|r| r.abstract_text.clone()),
        remaining,
    }))
    .into_response()
}

async fn post_label(State(svc): State<Arc<LabelService>>, body: axum::body::Bytes) -> Response {
    let sub: LabelSubmission = match serde_json::from_slice(&body) {
        Ok(s) => s,
        Err(e) => return error(StatusCode::UNPROCESSABLE_ENTITY, format!("malformed label: {e}")),
    };
    let mut store = svc.store.lock();
    let revision = sub
        .revision
        .unwrap_or_else(|| store.next_revision(&sub.pmid, &sub.labeler));
    let label = LabelRecord {
        pmid: sub.pmid,
        verdict: sub.verdict,
        reason: sub.reason,
        labeler: sub.labeler,
        timestamp: sub.timestamp.unwrap_or_else(Utc::now),
        revision,
        note: sub.note,
    };
    match store.record_label(label) {
        Ok(ack) => {
            drop(store);
            let mut leases = svc.leases.lock();
            if leases.get(&ack.pmid).is_some_and(|(l, _)| *l == ack.labeler) {
                leases.remove(&ack.pmid);
            }
            (StatusCode::OK, Json(ack)).into_response()
        }
        Err(e @ LabelError::Invalid { .. }) => error(StatusCode::UNPROCESSABLE_ENTITY, e.to_string()),
        Err(e @ LabelError::UnknownPmid(_)) => error(StatusCode::NOT_FOUND, e.to_string()),
        Err(e @ LabelError::Conflict { .. }) => error(StatusCode::CONFLICT, e.to_string()),
        Err(e) => {
            log::error!("label store: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string())
        }
    }
}

async fn progress(State(svc): State<Arc<LabelService>>, Query(q): Query<ProgressQuery>) -> Response {
    let store = svc.store.lock();
    Json(label_stats(&store, &svc.plan, q.split)).into_response()
}

async fn require_token(State(svc): State<Arc<LabelService>>, req: Request, next: Next) -> Response {
    if let Some(token) = &svc.token {
        let presented = req
            .headers()
            .get(header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "));
        if presented != Some(token.as_str()) {
            return error(StatusCode::UNAUTHORIZED, "missing or wrong bearer token");
        }
    }
    next.run(req).await
}

pub fn router(svc: Arc<LabelService>) -> Router {
    Router::new()
        .route("/queue", get(queue))
        .route("/labels", post(post_label))
        .route("/progress", get(progress))
        .layer(middleware::from_fn_with_state(svc.clone(), require_token))
        .with_state(svc)
}

/// Serves until ctrl-c.
pub async fn serve(svc: Arc<LabelService>, bind: &str) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(bind).await?;
    log::info!("label server listening on {}", listener.local_addr()?);
    axum::serve(listener, router(svc))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
