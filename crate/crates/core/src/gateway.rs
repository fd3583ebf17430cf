//! Gateway: ingestion and status.
//!
//! Both ingestion paths (HTTP and the ingestion queue) go through
//! [`Gateway::submit`], which writes in a fixed order: tracking record, page
//! blobs, `Validated`, then the worker-queue enqueue. A worker therefore never
//! sees a queued id whose pages are missing. The gateway holds no inference
//! client.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use axum::extract::{Path as UrlPath, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::task::JoinHandle;

use crate::clock::{secs, Clock, ScaledClock, Timestamp};
use crate::domain::{BlobKey, DocState, DocumentId, PipelineConfig, StatusEvent, Step};
use crate::mqueue::{Payload, Queue, StatusNotification};
use crate::store::Store;
use crate::worldgen::SyntheticDocument;

const STATUS_HOLDER: &str = "gateway-status";
const INGEST_HOLDER: &str = "gateway-ingest";
const CONSUMER_POLL: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubmissionSource {
    Api,
    IngestionQueue,
}

#[derive(Debug, Clone)]
pub struct Submission {
    pub doc_type: Option<String>,
    pub pages: Vec<Vec<u8>>,
    pub source: SubmissionSource,
    pub received_at: Timestamp,
    pub idempotency_key: Option<String>,
    /// Caller-chosen id; generated when absent.
    pub document_id: Option<DocumentId>,
}

impl Submission {
    pub fn new(doc_type: Option<String>, pages: Vec<Vec<u8>>, source: SubmissionSource) -> Self {
        Submission { doc_type, pages, source, received_at: Timestamp::ZERO, idempotency_key: None, document_id: None }
    }

    pub fn from_synthetic(doc: &SyntheticDocument, source: SubmissionSource) -> Self {
        Submission {
            document_id: Some(doc.document.id.clone()),
            ..Submission::new(Some(doc.document.doc_type.clone()), doc.page_blobs(), source)
        }
    }
}

/// Points at which an injected gateway crash aborts a submission.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrashPoint {
    AfterRecord,
    /// After this many page blobs are written.
    AfterPages(u32),
    AfterBlobs,
    AfterValidated,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GatewayError {
    #[error("validation: {0}")]
    Validation(String),
    #[error("storage: {0}")]
    Storage(String),
    #[error("gateway is stopped")]
    Stopped,
    #[error("document {0} not found")]
    NotFound(DocumentId),
    #[error("injected crash at {0:?}")]
    Crashed(CrashPoint),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubmitReceipt {
    pub document_id: DocumentId,
    pub state: DocState,
    /// True if the idempotency key matched an earlier submission.
    pub deduplicated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatusReport {
    pub document_id: DocumentId,
    pub doc_type: String,
    pub state: DocState,
    pub processing_start_time: Option<Timestamp>,
    pub delivery_count: u32,
    /// Duration of the last finished attempt of each step, model seconds.
    pub step_durations: BTreeMap<Step, f64>,
    pub cost_by_op: BTreeMap<String, f64>,
    pub total_cost: f64,
    pub updated_at: Timestamp,
}

pub struct Gateway {
    config: Arc<PipelineConfig>,
    store: Arc<Store>,
    queue: Arc<Queue<DocumentId>>,
    clock: Arc<ScaledClock>,
    stopped: AtomicBool,
    idempotency: Mutex<HashMap<String, DocumentId>>,
    notifications: Mutex<HashMap<DocumentId, StatusNotification>>,
    crash_point: Mutex<Option<CrashPoint>>,
    submitted: AtomicU64,
}

impl Gateway {
    pub fn new(config: Arc<PipelineConfig>, store: Arc<Store>, queue: Arc<Queue<DocumentId>>, clock: Arc<ScaledClock>) -> Self {
        Gateway {
            config,
            store,
            queue,
            clock,
            stopped: AtomicBool::new(false),
            idempotency: Mutex::new(HashMap::new()),
            notifications: Mutex::new(HashMap::new()),
            crash_point: Mutex::new(None),
            submitted: AtomicU64::new(0),
        }
    }

    /// Refuses new submissions from now on. Already queued documents are
    /// unaffected.
    pub fn stop(&self) {
        self.stopped.store(true, Ordering::SeqCst);
    }

    pub fn is_stopped(&self) -> bool {
        self.stopped.load(Ordering::SeqCst)
    }

    pub fn set_crash_point(&self, point: Option<CrashPoint>) {
        *self.crash_point.lock().unwrap_or_else(|e| e.into_inner()) = point;
    }

    pub fn submitted(&self) -> u64 {
        self.submitted.load(Ordering::Relaxed)
    }

    fn crash_at(&self, point: CrashPoint) -> Result<(), GatewayError> {
        match *self.crash_point.lock().unwrap_or_else(|e| e.into_inner()) {
            Some(p) if p == point => Err(GatewayError::Crashed(point)),
            _ => Ok(()),
        }
    }

    fn validate(&self, s: &Submission) -> Result<String, GatewayError> {
        if self.is_stopped() {
            return Err(GatewayError::Stopped);
        }
        if s.pages.is_empty() {
            return Err(GatewayError::Validation("submission has no pages".into()));
        }
        if let Some(i) = s.pages.iter().position(Vec::is_empty) {
            return Err(GatewayError::Validation(format!("page {i} is empty")));
        }
        let doc_type = match (&s.doc_type, &self.config.worker.default_doc_type) {
            (Some(t), _) => t.clone(),
            (None, Some(d)) => d.clone(),
            (None, None) => return Err(GatewayError::Validation("doc_type is required".into())),
        };
        if self.config.doc_type(&doc_type).is_none() {
            return Err(GatewayError::Validation(format!("unknown doc_type {doc_type:?}")));
        }
        Ok(doc_type)
    }

    pub fn submit(&self, submission: Submission) -> Result<SubmitReceipt, GatewayError> {
        let doc_type = self.validate(&submission)?;
        let id = submission.document_id.clone().unwrap_or_else(DocumentId::generate);
        if let Some(key) = &submission.idempotency_key {
            let mut seen = self.idempotency.lock().unwrap_or_else(|e| e.into_inner());
            if let Some(existing) = seen.get(key) {
                let state = self.store.tracking.get(existing).map(|r| r.status.state).unwrap_or(DocState::Submitted);
                return Ok(SubmitReceipt { document_id: existing.clone(), state, deduplicated: true });
            }
            seen.insert(key.clone(), id.clone());
        }
        let result = self.persist_and_enqueue(&id, &doc_type, &submission);
        if result.is_err() {
            if let Some(key) = &submission.idempotency_key {
                self.idempotency.lock().unwrap_or_else(|e| e.into_inner()).remove(key);
            }
        }
        result
    }

    fn persist_and_enqueue(&self, id: &DocumentId, doc_type: &str, s: &Submission) -> Result<SubmitReceipt, GatewayError> {
        let steps = self.config.doc_type(doc_type).expect("validated").steps.clone();
        let tracking = &self.store.tracking;
        tracking
            .create_record(id, doc_type, &steps, s.pages.len() as u32)
            .map_err(|e| GatewayError::Validation(e.to_string()))?;
        self.crash_at(CrashPoint::AfterRecord)?;
        for (i, page) in s.pages.iter().enumerate() {
            self.crash_at(CrashPoint::AfterPages(i as u32))?;
            if let Err(e) = self.store.blobs.put(&BlobKey::page(id, i as u32), page) {
                let event = StatusEvent::StepFailed { step: None, reason: "ingest".into() };
                let _ = tracking.update_status(id, &event, 0);
                return Err(GatewayError::Storage(e.to_string()));
            }
        }
        self.crash_at(CrashPoint::AfterBlobs)?;
        tracking.update_status(id, &StatusEvent::Validated, 0).map_err(|e| GatewayError::Storage(e.to_string()))?;
        self.crash_at(CrashPoint::AfterValidated)?;
        self.queue.enqueue(id.clone()).map_err(|e| GatewayError::Storage(e.to_string()))?;
        self.submitted.fetch_add(1, Ordering::Relaxed);
        Ok(SubmitReceipt { document_id: id.clone(), state: DocState::Queued, deduplicated: false })
    }

    /// Latest status: the tracking record, overridden by a newer consumed
    /// status notification.
    pub fn get_status(&self, id: &DocumentId) -> Result<StatusReport, GatewayError> {
        let rec = self.store.tracking.get(id).map_err(|_| GatewayError::NotFound(id.clone()))?;
        let mut state = rec.status.state.clone();
        let mut updated_at = rec.updated_at;
        if let Some(n) = self.notifications.lock().unwrap_or_else(|e| e.into_inner()).get(id) {
            if n.at > updated_at {
                state = n.state.clone();
                updated_at = n.at;
            }
        }
        let mut step_durations = BTreeMap::new();
        for t in &rec.timings {
            if let Some(end) = t.finished_at {
                step_durations.insert(t.step, end.saturating_since(t.started_at).as_secs_f64());
            }
        }
        let mut cost_by_op = BTreeMap::new();
        for c in &rec.costs {
            *cost_by_op.entry(c.op.clone()).or_insert(0.0) += c.unit_cost;
        }
        Ok(StatusReport {
            document_id: id.clone(),
            doc_type: rec.doc_type.clone(),
            state,
            processing_start_time: rec.status.processing_start_time,
            delivery_count: rec.status.delivery_count,
            step_durations,
            cost_by_op,
            total_cost: rec.total_cost(),
            updated_at,
        })
    }

    pub fn last_notification(&self, id: &DocumentId) -> Option<StatusNotification> {
        self.notifications.lock().unwrap_or_else(|e| e.into_inner()).get(id).cloned()
    }

    fn consume(&self, n: StatusNotification) {
        let mut map = self.notifications.lock().unwrap_or_else(|e| e.into_inner());
        match map.get(&n.document_id) {
            Some(prev) if prev.at > n.at => {}
            _ => {
                map.insert(n.document_id.clone(), n);
            }
        }
    }

    /// The single status-queue consumer of this gateway instance.
    pub fn spawn_status_consumer(self: &Arc<Self>, queue: Arc<Queue<StatusNotification>>) -> JoinHandle<()> {
        let gw = self.clone();
        tokio::spawn(async move {
            let vt = secs(60.0);
            loop {
                match queue.receive(STATUS_HOLDER, vt) {
                    Ok(Some(lease)) => {
                        gw.consume(lease.payload.clone());
                        let _ = queue.ack(&lease);
                    }
                    Ok(None) if queue.is_closed() => break,
                    _ => {
                        tokio::select! {
                            _ = queue.notified() => {}
                            _ = gw.clock.sleep(secs(CONSUMER_POLL)) => {}
                        }
                    }
                }
            }
        })
    }

    /// Consumes the ingestion queue: each message names page blobs already
    /// uploaded to the inbox area of the blob store.
    pub fn spawn_ingestion_consumer(self: &Arc<Self>, queue: Arc<Queue<IngestionMessage>>) -> JoinHandle<()> {
        let gw = self.clone();
        tokio::spawn(async move {
            let vt = secs(60.0);
            loop {
                match queue.receive(INGEST_HOLDER, vt) {
                    Ok(Some(lease)) => {
                        match gw.submit_from_inbox(&lease.payload) {
                            Err(GatewayError::Stopped) => {
                                let _ = queue.nack(&lease);
                                break;
                            }
                            Err(GatewayError::Storage(_)) => {
                                let _ = queue.nack(&lease);
                            }
                            _ => {
                                let _ = queue.ack(&lease);
                            }
                        }
                    }
                    Ok(None) if queue.is_closed() => break,
                    _ => {
                        tokio::select! {
                            _ = queue.notified() => {}
                            _ = gw.clock.sleep(secs(CONSUMER_POLL)) => {}
                        }
                    }
                }
            }
        })
    }

    pub fn submit_from_inbox(&self, msg: &IngestionMessage) -> Result<SubmitReceipt, GatewayError> {
        if self.is_stopped() {
            return Err(GatewayError::Stopped);
        }
        let mut pages = Vec::with_capacity(msg.page_keys.len());
        for k in &msg.page_keys {
            let blob = self.store.blobs.get(k).map_err(|e| GatewayError::Validation(format!("{k}: {e}")))?;
            pages.push(blob.bytes);
        }
        self.submit(Submission {
            doc_type: msg.doc_type.clone(),
            pages,
            source: SubmissionSource::IngestionQueue,
            received_at: self.clock.now(),
            idempotency_key: msg.idempotency_key.clone(),
            document_id: msg.document_id.clone(),
        })
    }
}

/// Asynchronous hand-off: references to page blobs under `inbox/`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestionMessage {
    pub doc_type: Option<String>,
    pub page_keys: Vec<BlobKey>,
    pub idempotency_key: Option<String>,
    pub document_id: Option<DocumentId>,
}

impl Payload for IngestionMessage {
    fn size_hint(&self) -> usize {
        self.page_keys.iter().map(|k| k.as_str().len() + 4).sum::<usize>() + 128
    }
}

impl IngestionMessage {
    /// Uploads a document's pages to the inbox and returns the message
    /// pointing at them.
    pub fn stage(store: &Store, doc: &SyntheticDocument) -> Result<Self, GatewayError> {
        let mut page_keys = Vec::new();
        for (i, bytes) in doc.page_blobs().iter().enumerate() {
            let key = BlobKey::new(format!("inbox/{}/{i:04}", doc.document.id));
            store.blobs.put(&key, bytes).map_err(|e| GatewayError::Storage(e.to_string()))?;
            page_keys.push(key);
        }
        Ok(IngestionMessage {
            doc_type: Some(doc.document.doc_type.clone()),
            page_keys,
            idempotency_key: None,
            document_id: Some(doc.document.id.clone()),
        })
    }
}

// ---------------------------------------------------------------------------
// Arrival patterns
// ---------------------------------------------------------------------------

/// Scanner burst rate in pages per minute.
pub const SCANNER_PAGES_PER_MINUTE: f64 = 150.0;
/// Modeled page-image size range, MiB. Metadata only; nothing is allocated.
pub const SCANNER_PAGE_MIB: (f64, f64) = (2.0, 90.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ArrivalPattern {
    /// All documents at once.
    Batch,
    Steady { rate: f64 },
    /// Batches of `batch_size` documents scanned at `pages_per_minute`, one
    /// batch every `batch_interval` seconds, only inside the active window
    /// `[start, end)` seconds of each day.
    Bursty { batch_size: usize, batch_interval: f64, pages_per_minute: f64, active_hours: Option<(f64, f64)> },
}

impl ArrivalPattern {
    pub fn scanner(batch_size: usize, batch_interval: f64) -> Self {
        ArrivalPattern::Bursty { batch_size, batch_interval, pages_per_minute: SCANNER_PAGES_PER_MINUTE, active_hours: None }
    }

    /// Arrival offsets in model seconds for documents of the given page counts.
    pub fn schedule(&self, page_counts: &[u32]) -> Vec<f64> {
        match self {
            ArrivalPattern::Batch => vec![0.0; page_counts.len()],
            ArrivalPattern::Steady { rate } => (0..page_counts.len()).map(|i| i as f64 / rate).collect(),
            ArrivalPattern::Bursty { batch_size, batch_interval, pages_per_minute, active_hours } => {
                let per_page = 60.0 / pages_per_minute;
                let mut out = Vec::with_capacity(page_counts.len());
                let mut scanner_free = 0.0_f64;
                for (b, chunk) in page_counts.chunks((*batch_size).max(1)).enumerate() {
                    // one scanner: a batch cannot start before the previous one ends
                    let mut t = next_active((b as f64 * batch_interval).max(scanner_free), *active_hours);
                    for &p in chunk {
                        t += p as f64 * per_page;
                        out.push(t);
                    }
                    scanner_free = t;
                }
                out
            }
        }
    }
}

const DAY: f64 = 86_400.0;

fn next_active(t: f64, window: Option<(f64, f64)>) -> f64 {
    let Some((start, end)) = window else { return t };
    let day = (t / DAY).floor();
    let tod = t - day * DAY;
    if tod < start {
        day * DAY + start
    } else if tod >= end {
        (day + 1.0) * DAY + start
    } else {
        t
    }
}

/// One submission made by [`run_ingestion`].
#[derive(Debug, Clone, PartialEq)]
pub struct Arrival {
    pub document_id: DocumentId,
    pub at: Timestamp,
    pub result: Result<SubmitReceipt, GatewayError>,
}

/// Submits `corpus` following `pattern`, sleeping on the model clock.
pub async fn run_ingestion(gateway: &Gateway, pattern: &ArrivalPattern, corpus: &[SyntheticDocument]) -> Vec<Arrival> {
    let counts: Vec<u32> = corpus.iter().map(|d| d.pages.len() as u32).collect();
    let offsets = pattern.schedule(&counts);
    let origin = gateway.clock.now();
    let mut out = Vec::with_capacity(corpus.len());
    for (doc, off) in corpus.iter().zip(offsets) {
        gateway.clock.sleep_until(origin + secs(off)).await;
        let at = gateway.clock.now();
        let mut sub = Submission::from_synthetic(doc, SubmissionSource::IngestionQueue);
        sub.received_at = at;
        let result = gateway.submit(sub);
        out.push(Arrival { document_id: doc.document.id.clone(), at, result });
    }
    out
}

// ---------------------------------------------------------------------------
// HTTP
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SubmitBody {
    #[serde(default)]
    pub doc_type: Option<String>,
    /// Base64-encoded page payloads.
    #[serde(default)]
    pub pages: Vec<String>,
    /// Alternatively, keys of page blobs already in the store.
    #[serde(default)]
    pub page_keys: Vec<BlobKey>,
    #[serde(default)]
    pub document_id: Option<DocumentId>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ErrorBody {
    error: String,
}

fn error_response(e: &GatewayError) -> Response {
    let code = match e {
        GatewayError::Validation(_) => StatusCode::BAD_REQUEST,
        GatewayError::NotFound(_) => StatusCode::NOT_FOUND,
        GatewayError::Stopped | GatewayError::Storage(_) | GatewayError::Crashed(_) => StatusCode::SERVICE_UNAVAILABLE,
    };
    (code, Json(ErrorBody { error: e.to_string() })).into_response()
}

async fn post_document(State(gw): State<Arc<Gateway>>, headers: HeaderMap, Json(body): Json<SubmitBody>) -> Response {
    let key = headers.get("idempotency-key").and_then(|v| v.to_str().ok()).map(str::to_owned);
    let result = if !body.page_keys.is_empty() {
        gw.submit_from_inbox(&IngestionMessage {
            doc_type: body.doc_type,
            page_keys: body.page_keys,
            idempotency_key: key,
            document_id: body.document_id,
        })
    } else {
        let mut pages = Vec::with_capacity(body.pages.len());
        for (i, p) in body.pages.iter().enumerate() {
            match base64::engine::general_purpose::STANDARD.decode(p) {
                Ok(b) => pages.push(b),
                Err(e) => return error_response(&GatewayError::Validation(format!("page {i}: {e}"))),
            }
        }
        gw.submit(Submission {
            doc_type: body.doc_type,
            pages,
            source: SubmissionSource::Api,
            received_at: gw.clock.now(),
            idempotency_key: key,
            document_id: body.document_id,
        })
    };
    match result {
        Ok(r) if r.deduplicated => (StatusCode::OK, Json(r)).into_response(),
        Ok(r) => (StatusCode::CREATED, Json(r)).into_response(),
        Err(e) => error_response(&e),
    }
}

async fn get_document_status(State(gw): State<Arc<Gateway>>, UrlPath(id): UrlPath<String>) -> Response {
    match gw.get_status(&DocumentId::new(id)) {
        Ok(r) => (StatusCode::OK, Json(r)).into_response(),
        Err(e) => error_response(&e),
    }
}

async fn healthz(State(gw): State<Arc<Gateway>>) -> Response {
    if gw.is_stopped() {
        (StatusCode::SERVICE_UNAVAILABLE, "stopped").into_response()
    } else {
        (StatusCode::OK, "ok").into_response()
    }
}

pub fn router(gateway: Arc<Gateway>) -> Router {
    Router::new()
        .route("/documents", post(post_document))
        .route("/documents/{id}/status", get(get_document_status))
        .route("/healthz", get(healthz))
        .with_state(gateway)
}

pub async fn serve(listener: tokio::net::TcpListener, gateway: Arc<Gateway>) -> std::io::Result<()> {
    axum::serve(listener, router(gateway)).await
}
