//! Worker pods: lease documents from the worker queue and run each
//! document's configured pipeline with checkpoint/resume.
//!
//! A pod holds at most `tasks_per_pod` leases at a time; every lease is
//! processed by its own task. Within a document steps run strictly in
//! order, while page classification fans out across pages. Each completed
//! step persists its output as a checkpoint before the status moves on, so
//! a redelivered document resumes after its furthest completed step.
//!
//! Every lease ends in exactly one of: ack after `Completed`, ack after a
//! terminal failure, nack (or lease expiry) for redelivery.

mod chaos;
mod events;
mod stale;
mod steps;

use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;

use futures::stream::{self, StreamExt};
use thiserror::Error;
use tokio::sync::{watch, Semaphore};
use tokio::task::{JoinHandle, JoinSet};

use crate::clock::{secs, Clock, ScaledClock, Timestamp};
use crate::domain::{BlobKey, DocState, DocTypeConfig, DocumentId, PipelineConfig, StatusEvent, Step, TransitionError};
use crate::inference::{InferenceClient, InferenceError, InferenceRequest, InferenceResponse, InferenceResult, OcrResult};
use crate::mqueue::{Lease, NackOutcome, Queue, QueueError, StatusNotification};
use crate::store::{Store, StoreError, TrackingRecord};

pub use chaos::{CrashInjector, OwnershipMonitor};
pub use events::{Event, EventKind, EventLog};
pub use stale::{detect_stale, spawn_sweeper, sweep_once, SweepReport};
pub use steps::{
    aggregate_route, stitch, ClassifyOutput, DocumentResult, LabelSource, MetadataOutput, OcrOutput, PageLabel, ParseOutput,
    StepOutputs, StitchError, StitchedText,
};

/// Transient inference failures are retried this many times per call.
const MAX_TRANSIENT_RETRIES: u32 = 20;
const TRANSIENT_BACKOFF_START: f64 = 0.5;
const TRANSIENT_BACKOFF_MAX: f64 = 8.0;
/// Parse retries a schema violation once before failing the step.
const PARSE_SCHEMA_RETRIES: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("step {step} failed: {cause}")]
pub struct StepError {
    pub step: Step,
    pub cause: String,
    /// Whether re-running the whole step may help.
    pub retryable: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProcessOutcome {
    Completed { duplicate: bool },
    Failed(String),
    /// The document was already terminal when leased.
    AlreadyTerminal(DocState),
    /// No tracking record exists for the leased id.
    Orphan,
    /// Step retries exhausted; the lease is nacked.
    Retry(StepError),
    /// Killed by the crash injector; the lease is left to expire.
    Crashed(Step),
}

/// Everything a worker task depends on. Cheap to clone.
#[derive(Clone)]
pub struct WorkerContext {
    pub config: Arc<PipelineConfig>,
    pub store: Arc<Store>,
    pub queue: Arc<Queue<DocumentId>>,
    pub status_queue: Arc<Queue<StatusNotification>>,
    pub inference: Arc<dyn InferenceClient>,
    pub clock: Arc<ScaledClock>,
    pub events: Arc<EventLog>,
    pub monitor: Arc<OwnershipMonitor>,
    pub crash: Arc<CrashInjector>,
}

impl WorkerContext {
    fn now(&self) -> Timestamp {
        self.clock.now()
    }

    fn log(&self, pod: &str, doc: Option<&DocumentId>, kind: EventKind) {
        self.events.record(self.now(), pod, doc, kind);
    }

    fn publish(&self, doc: &DocumentId, state: DocState) {
        let _ = self.status_queue.enqueue(StatusNotification { document_id: doc.clone(), state, at: self.now() });
    }

    /// Marks a dead-lettered document `Failed(max_retries)`. Idempotent.
    pub fn fail_dead_letter(&self, pod: &str, doc: &DocumentId) {
        let event = StatusEvent::StepFailed { step: None, reason: "max_retries".into() };
        if let Ok(rec) = self.store.tracking.update_status(doc, &event, 0) {
            if matches!(rec.status.state, DocState::Failed(_)) {
                self.log(pod, Some(doc), EventKind::Failed { reason: "max_retries".into() });
                self.publish(doc, rec.status.state);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Pods
// ---------------------------------------------------------------------------

#[derive(Debug, Default)]
pub struct PodStats {
    pub in_flight: AtomicUsize,
    pub peak_in_flight: AtomicUsize,
    pub leases: AtomicU64,
}

pub struct WorkerPod {
    pub pod_id: String,
    ctx: WorkerContext,
    tasks_per_pod: usize,
}

pub struct PodHandle {
    pub pod_id: String,
    shutdown: watch::Sender<bool>,
    join: JoinHandle<()>,
    stats: Arc<PodStats>,
}

impl PodHandle {
    /// Stops leasing new documents and waits for in-flight ones to finish.
    pub async fn shutdown(self) {
        let _ = self.shutdown.send(true);
        let _ = self.join.await;
    }

    /// Aborts the pod and every in-flight task without acking anything.
    pub fn kill(&self) {
        self.join.abort();
    }

    pub async fn join_killed(self) {
        self.join.abort();
        let _ = self.join.await;
    }

    pub fn stats(&self) -> &PodStats {
        &self.stats
    }

    pub fn is_finished(&self) -> bool {
        self.join.is_finished()
    }
}

struct InFlightGuard(Arc<PodStats>);

impl InFlightGuard {
    fn new(stats: Arc<PodStats>) -> Self {
        let n = stats.in_flight.fetch_add(1, Ordering::SeqCst) + 1;
        stats.peak_in_flight.fetch_max(n, Ordering::SeqCst);
        stats.leases.fetch_add(1, Ordering::Relaxed);
        InFlightGuard(stats)
    }
}

impl Drop for InFlightGuard {
    fn drop(&mut self) {
        self.0.in_flight.fetch_sub(1, Ordering::SeqCst);
    }
}

impl WorkerPod {
    pub fn new(pod_id: impl Into<String>, ctx: WorkerContext) -> Self {
        let tasks_per_pod = ctx.config.worker.tasks_per_pod;
        WorkerPod { pod_id: pod_id.into(), ctx, tasks_per_pod }
    }

    pub fn with_tasks(mut self, tasks: usize) -> Self {
        self.tasks_per_pod = tasks.max(1);
        self
    }

    pub fn spawn(self) -> PodHandle {
        let (tx, rx) = watch::channel(false);
        let stats = Arc::new(PodStats::default());
        let pod_id = self.pod_id.clone();
        let join = tokio::spawn(self.run(rx, stats.clone()));
        PodHandle { pod_id, shutdown: tx, join, stats }
    }

    async fn run(self, mut shutdown: watch::Receiver<bool>, stats: Arc<PodStats>) {
        let slots = Arc::new(Semaphore::new(self.tasks_per_pod));
        let mut tasks = JoinSet::new();
        let vt = self.ctx.config.visibility_timeout();
        let poll = secs(self.ctx.config.worker.poll_interval);
        loop {
            while tasks.try_join_next().is_some() {}
            if *shutdown.borrow() {
                break;
            }
            let permit = tokio::select! {
                p = slots.clone().acquire_owned() => p.expect("pod semaphore is never closed"),
                _ = shutdown.changed() => break,
            };
            match self.ctx.queue.receive(&self.pod_id, vt) {
                Ok(Some(lease)) => {
                    let ctx = self.ctx.clone();
                    let pod = self.pod_id.clone();
                    let guard = InFlightGuard::new(stats.clone());
                    tasks.spawn(async move {
                        let _permit = permit;
                        let _guard = guard;
                        process_lease(&ctx, &pod, lease).await;
                    });
                }
                Ok(None) => {
                    drop(permit);
                    if self.ctx.queue.is_closed() && self.ctx.queue.is_empty() {
                        // Nothing will ever arrive; keep idling until shutdown.
                    }
                    tokio::select! {
                        _ = self.ctx.queue.notified() => {}
                        _ = self.ctx.clock.sleep(poll) => {}
                        _ = shutdown.changed() => {}
                    }
                }
                Err(e) => {
                    drop(permit);
                    tracing::warn!(pod = %self.pod_id, error = %e, "receive failed");
                    self.ctx.clock.sleep(poll).await;
                }
            }
        }
        while tasks.join_next().await.is_some() {}
    }
}

// ---------------------------------------------------------------------------
// Lease processing
// ---------------------------------------------------------------------------

struct OwnershipGuard<'a> {
    monitor: &'a OwnershipMonitor,
    doc: DocumentId,
    holder: String,
}

impl Drop for OwnershipGuard<'_> {
    fn drop(&mut self) {
        self.monitor.exit(&self.doc, &self.holder);
    }
}

/// Processes one lease to its queue outcome (ack, nack, or abandonment).
pub async fn process_lease(ctx: &WorkerContext, pod: &str, lease: Lease<DocumentId>) -> ProcessOutcome {
    let doc = lease.payload.clone();
    ctx.log(pod, Some(&doc), EventKind::LeaseAcquired { lease_id: lease.lease_id.to_string(), delivery_count: lease.delivery_count });
    let holder = format!("{pod}/{}", lease.lease_id);
    if let Some(other) = ctx.monitor.enter(&doc, &holder, lease.deadline, ctx.now()) {
        ctx.log(pod, Some(&doc), EventKind::OwnershipViolation { other_holder: other });
    }
    let _own = OwnershipGuard { monitor: &ctx.monitor, doc: doc.clone(), holder };

    let outcome = process_document(ctx, pod, &doc, lease.delivery_count).await;
    match &outcome {
        ProcessOutcome::Crashed(_) => {}
        ProcessOutcome::Retry(_) => match ctx.queue.nack(&lease) {
            Ok(NackOutcome::Requeued) => ctx.log(pod, Some(&doc), EventKind::Nacked { dead_lettered: false }),
            Ok(NackOutcome::DeadLettered) => {
                ctx.log(pod, Some(&doc), EventKind::Nacked { dead_lettered: true });
                ctx.fail_dead_letter(pod, &doc);
            }
            Err(e) => ctx.log(pod, Some(&doc), EventKind::AckFailed { error: e.to_string() }),
        },
        _ => {
            if let Err(e) = ctx.queue.ack(&lease) {
                if !matches!(e, QueueError::LeaseExpired(_) | QueueError::UnknownLease(_)) {
                    tracing::warn!(doc = %doc, error = %e, "ack failed");
                }
                ctx.log(pod, Some(&doc), EventKind::AckFailed { error: e.to_string() });
            }
        }
    }
    outcome
}

/// Runs the document's remaining pipeline steps. `attempt` is the delivery count.
pub async fn process_document(ctx: &WorkerContext, pod: &str, doc: &DocumentId, attempt: u32) -> ProcessOutcome {
    let tracking = &ctx.store.tracking;
    let record = match tracking.get(doc) {
        Ok(r) => r,
        Err(_) => return ProcessOutcome::Orphan,
    };
    let pulled = match &record.status.state {
        s if s.is_terminal() => {
            ctx.log(pod, Some(doc), EventKind::DuplicateDelivery { state: s.clone() });
            return ProcessOutcome::AlreadyTerminal(s.clone());
        }
        DocState::Submitted => return ProcessOutcome::Orphan,
        DocState::Queued => StatusEvent::WorkerPulled,
        DocState::Processing(_) | DocState::Stale(_) => StatusEvent::Redelivered,
        _ => unreachable!("terminal states handled above"),
    };

    let Some(doc_config) = ctx.config.doc_type(&record.doc_type).cloned() else {
        return fail(ctx, pod, doc, &record, attempt, None, "config");
    };
    if let Err(e) = tracking.update_status(doc, &pulled, attempt) {
        return ProcessOutcome::Retry(StepError { step: record.steps[0], cause: e.to_string(), retryable: true });
    }

    let exec = Exec { ctx, pod, doc, record: &record, doc_config: &doc_config, attempt, pst_marked: AtomicBool::new(false) };
    let mut outputs = StepOutputs::default();
    for &step in &record.steps {
        match tracking.checkpoint_payload(doc, step) {
            Ok(Some(bytes)) if outputs.restore(step, &bytes).is_ok() => {
                ctx.log(pod, Some(doc), EventKind::StepSkipped { step });
                continue;
            }
            _ => {}
        }
        if let Err(e) = exec.run_step_with_retries(step, &mut outputs).await {
            return ProcessOutcome::Retry(e);
        }
        let bytes = outputs.encode(step).expect("step produced output");
        if let Err(e) = tracking.save_checkpoint(doc, step, &bytes, attempt) {
            return ProcessOutcome::Retry(StepError { step, cause: e.to_string(), retryable: true });
        }
        let _ = tracking.append_costs(doc, outputs.costs(step));
        match tracking.update_status(doc, &StatusEvent::StepCompleted(step), attempt) {
            Ok(_) => {}
            Err(StoreError::Transition(TransitionError::InvalidTransition { status, .. })) if status.is_terminal() => {
                // Another executor finished the document meanwhile.
            }
            Err(e) => return ProcessOutcome::Retry(StepError { step, cause: e.to_string(), retryable: true }),
        }
        if ctx.crash.should_crash(doc, step) {
            ctx.log(pod, Some(doc), EventKind::Crashed { after_step: step });
            return ProcessOutcome::Crashed(step);
        }
    }

    let result = DocumentResult::build(doc, &record.doc_type, &record.steps, &outputs);
    let key = BlobKey::result(doc);
    if let Err(e) = ctx.store.blobs.put(&key, &result.to_bytes()) {
        let last = *record.steps.last().expect("non-empty pipeline");
        return ProcessOutcome::Retry(StepError { step: last, cause: e.to_string(), retryable: true });
    }
    ctx.log(pod, Some(doc), EventKind::ResultUploaded { key: key.to_string() });
    let duplicate = match tracking.update_status(doc, &StatusEvent::AllStepsCompleted, attempt) {
        Ok(_) => false,
        Err(StoreError::Transition(TransitionError::InvalidTransition { status: DocState::Completed, .. })) => true,
        Err(e) => {
            let last = *record.steps.last().expect("non-empty pipeline");
            return ProcessOutcome::Retry(StepError { step: last, cause: e.to_string(), retryable: true });
        }
    };
    ctx.log(pod, Some(doc), EventKind::Completed { duplicate });
    if !duplicate {
        ctx.publish(doc, DocState::Completed);
    }
    ProcessOutcome::Completed { duplicate }
}

fn fail(
    ctx: &WorkerContext,
    pod: &str,
    doc: &DocumentId,
    record: &TrackingRecord,
    attempt: u32,
    step: Option<Step>,
    reason: &str,
) -> ProcessOutcome {
    let event = StatusEvent::StepFailed { step, reason: reason.to_owned() };
    let state = match ctx.store.tracking.update_status(doc, &event, attempt) {
        Ok(r) => r.status.state,
        Err(_) => record.status.state.clone(),
    };
    ctx.log(pod, Some(doc), EventKind::Failed { reason: reason.to_owned() });
    ctx.publish(doc, state);
    ProcessOutcome::Failed(reason.to_owned())
}

/// Per-lease execution state.
struct Exec<'a> {
    ctx: &'a WorkerContext,
    pod: &'a str,
    doc: &'a DocumentId,
    record: &'a TrackingRecord,
    doc_config: &'a DocTypeConfig,
    attempt: u32,
    pst_marked: AtomicBool,
}

impl Exec<'_> {
    fn log(&self, kind: EventKind) {
        self.ctx.log(self.pod, Some(self.doc), kind);
    }

    fn page_key(&self, i: u32) -> BlobKey {
        BlobKey::page(self.doc, i)
    }

    /// One inference call. Marks `processing_start_time` before the first
    /// call and retries transient failures at the service boundary.
    async fn call(&self, request: InferenceRequest, page_index: Option<u32>) -> Result<InferenceResponse, InferenceError> {
        if !self.pst_marked.swap(true, Ordering::SeqCst) {
            let _ = self.ctx.store.tracking.mark_processing_started(self.doc, self.ctx.now());
        }
        let mut backoff = TRANSIENT_BACKOFF_START;
        let mut tries = 0;
        loop {
            match self.ctx.inference.call(request.clone()).await {
                Ok(r) => {
                    self.log(EventKind::InferenceCall {
                        op: r.op,
                        class: r.op.class(),
                        page_index,
                        queued_at: r.timing.queued_at,
                        started_at: r.timing.started_at,
                        finished_at: r.timing.finished_at,
                        cost: r.cost.unit_cost,
                    });
                    return Ok(r);
                }
                Err(e) if e.is_transient() && tries < MAX_TRANSIENT_RETRIES => {
                    tries += 1;
                    self.log(EventKind::InferenceRetry { op: request.op(), error: e.to_string() });
                    self.ctx.clock.sleep(secs(backoff)).await;
                    backoff = (backoff * 2.0).min(TRANSIENT_BACKOFF_MAX);
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// A page-level call with per-page retries.
    async fn call_page(&self, step: Step, page_index: u32, make: impl Fn() -> InferenceRequest) -> Result<InferenceResponse, StepError> {
        let retries = self.ctx.config.worker.page_retries;
        let mut last = None;
        for _ in 0..=retries {
            match self.call(make(), Some(page_index)).await {
                Ok(r) => return Ok(r),
                Err(e) => {
                    self.log(EventKind::PageRetry { step, page_index, error: e.to_string() });
                    last = Some(e);
                }
            }
        }
        Err(StepError { step, cause: format!("page {page_index}: {}", last.expect("at least one attempt")), retryable: true })
    }

    async fn run_step_with_retries(&self, step: Step, outputs: &mut StepOutputs) -> Result<(), StepError> {
        let retries = self.ctx.config.worker.step_retries;
        let tracking = &self.ctx.store.tracking;
        let mut attempt = 0;
        loop {
            let started_at = self.ctx.now();
            let _ = tracking.record_step_started(self.doc, step, self.attempt);
            self.log(EventKind::StepStarted { step, attempt: self.attempt });
            match self.run_step(step, outputs).await {
                Ok(()) => {
                    self.log(EventKind::StepFinished { step, attempt: self.attempt, started_at, finished_at: self.ctx.now() });
                    return Ok(());
                }
                Err(e) => {
                    self.log(EventKind::StepRetry { step, attempt: self.attempt, started_at, error: e.cause.clone() });
                    if !e.retryable || attempt >= retries {
                        return Err(e);
                    }
                    attempt += 1;
                }
            }
        }
    }

    async fn run_step(&self, step: Step, outputs: &mut StepOutputs) -> Result<(), StepError> {
        match step {
            Step::Classify => outputs.classify = Some(self.classify().await?),
            Step::Metadata => outputs.metadata = Some(self.metadata().await?),
            Step::Ocr => outputs.ocr = Some(self.ocr().await?),
            Step::Stitch => {
                let ocr = outputs.ocr.as_ref().ok_or_else(|| missing(step, "ocr"))?;
                let s = stitch(&ocr.pages, self.record.page_count)
                    .map_err(|e| StepError { step, cause: e.to_string(), retryable: false })?;
                outputs.stitch = Some(s);
            }
            Step::Parse => {
                let stitched = outputs.stitch.as_ref().ok_or_else(|| missing(step, "stitch"))?;
                let route = outputs.classify.as_ref().map(|c| c.route.as_str());
                outputs.parse = Some(self.parse(stitched, route).await?);
            }
        }
        Ok(())
    }

    async fn classify(&self) -> Result<ClassifyOutput, StepError> {
        let step = Step::Classify;
        let threshold = self.ctx.config.worker.clip_confidence_threshold;
        let n = self.record.page_count;
        let fanout = match self.ctx.config.worker.classify_fanout {
            0 => n.max(1) as usize,
            k => k,
        };
        let results: Vec<Result<(PageLabel, Vec<crate::domain::CostEntry>), StepError>> = stream::iter(0..n)
            .map(|i| async move {
                let key = self.page_key(i);
                let clip = self
                    .call_page(step, i, || InferenceRequest::ClassifyClip {
                        document_id: self.doc.clone(),
                        page_index: i,
                        page_key: key.clone(),
                    })
                    .await?;
                let (label, conf) = classification(&clip.result, step)?;
                let mut costs = vec![clip.cost];
                if conf > threshold {
                    return Ok((PageLabel { page_index: i, label, confidence: conf, clip_confidence: conf, source: LabelSource::Clip }, costs));
                }
                let vlm = self
                    .call_page(step, i, || InferenceRequest::ClassifyVlm {
                        document_id: self.doc.clone(),
                        page_index: i,
                        page_key: key.clone(),
                    })
                    .await?;
                let (vlabel, vconf) = classification(&vlm.result, step)?;
                costs.push(vlm.cost);
                Ok((PageLabel { page_index: i, label: vlabel, confidence: vconf, clip_confidence: conf, source: LabelSource::Vlm }, costs))
            })
            .buffered(fanout)
            .collect()
            .await;
        let mut pages = Vec::with_capacity(n as usize);
        let mut costs = Vec::new();
        for r in results {
            let (p, c) = r?;
            pages.push(p);
            costs.extend(c);
        }
        let route = aggregate_route(&pages).unwrap_or_else(|| self.record.doc_type.clone());
        Ok(ClassifyOutput { pages, route, costs })
    }

    async fn metadata(&self) -> Result<MetadataOutput, StepError> {
        let step = Step::Metadata;
        let backend = self.doc_config.metadata_backend;
        let key = self.page_key(0);
        let request = InferenceRequest::Detect { document_id: self.doc.clone(), page_index: 0, page_key: key, backend };
        match self.call(request, Some(0)).await {
            Ok(r) => match r.result {
                InferenceResult::Metadata(m) => Ok(MetadataOutput { page_index: 0, metadata: Some(m), costs: vec![r.cost] }),
                _ => Err(StepError { step, cause: "unexpected detect result".into(), retryable: true }),
            },
            Err(InferenceError::NotACoverPage(_)) => Ok(MetadataOutput { page_index: 0, metadata: None, costs: Vec::new() }),
            Err(e) => Err(StepError { step, cause: e.to_string(), retryable: true }),
        }
    }

    async fn ocr(&self) -> Result<OcrOutput, StepError> {
        let step = Step::Ocr;
        let per_page = self.ctx.config.worker.ocr_page_checkpoints;
        let blobs = &self.ctx.store.blobs;
        let mut pages = Vec::with_capacity(self.record.page_count as usize);
        let mut costs = Vec::new();
        for i in 0..self.record.page_count {
            let cp_key = BlobKey::page_checkpoint(self.doc, step, i);
            if per_page {
                if let Some(page) = blobs.get(&cp_key).ok().and_then(|b| serde_json::from_slice::<(OcrResult, crate::domain::CostEntry)>(&b.bytes).ok()) {
                    pages.push(page.0);
                    costs.push(page.1);
                    continue;
                }
            }
            let key = self.page_key(i);
            let r = self
                .call_page(step, i, || InferenceRequest::Ocr { document_id: self.doc.clone(), page_index: i, page_key: key.clone() })
                .await?;
            let InferenceResult::Ocr(result) = r.result else {
                return Err(StepError { step, cause: "unexpected ocr result".into(), retryable: true });
            };
            if per_page {
                let bytes = serde_json::to_vec(&(&result, &r.cost)).expect("ocr page serializes");
                let _ = blobs.put(&cp_key, &bytes);
            }
            pages.push(result);
            costs.push(r.cost);
        }
        Ok(OcrOutput { pages, costs })
    }

    async fn parse(&self, stitched: &StitchedText, route: Option<&str>) -> Result<ParseOutput, StepError> {
        let step = Step::Parse;
        let (schema_doc_type, schema) = match route.and_then(|r| self.ctx.config.doc_type(r).map(|c| (r, c))) {
            Some((r, c)) if !c.fields.is_empty() => (r.to_owned(), c.fields.clone()),
            _ => (self.record.doc_type.clone(), self.doc_config.fields.clone()),
        };
        let text = stitched.text();
        let mut violations = 0;
        loop {
            let request = InferenceRequest::Parse { document_id: self.doc.clone(), text: text.clone(), schema: schema.clone() };
            match self.call(request, None).await {
                Ok(r) => {
                    let InferenceResult::Parse { fields, input_tokens, output_tokens } = r.result else {
                        return Err(StepError { step, cause: "unexpected parse result".into(), retryable: true });
                    };
                    if let Err(e) = crate::inference::validate_fields(&fields, &schema) {
                        violations += 1;
                        if violations > PARSE_SCHEMA_RETRIES {
                            return Err(StepError { step, cause: e.to_string(), retryable: false });
                        }
                        continue;
                    }
                    return Ok(ParseOutput { schema_doc_type, fields, input_tokens, output_tokens, costs: vec![r.cost] });
                }
                Err(InferenceError::SchemaViolation(m)) => {
                    violations += 1;
                    if violations > PARSE_SCHEMA_RETRIES {
                        return Err(StepError { step, cause: format!("schema violation: {m}"), retryable: false });
                    }
                }
                Err(e) => return Err(StepError { step, cause: e.to_string(), retryable: true }),
            }
        }
    }
}

fn missing(step: Step, needed: &str) -> StepError {
    StepError { step, cause: format!("{needed} output missing"), retryable: false }
}

fn classification(result: &InferenceResult, step: Step) -> Result<(String, f64), StepError> {
    match result {
        InferenceResult::Classification { label, confidence } => Ok((label.clone(), *confidence)),
        _ => Err(StepError { step, cause: "unexpected classify result".into(), retryable: true }),
    }
}
