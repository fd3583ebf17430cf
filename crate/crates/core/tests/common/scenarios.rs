//! End-to-end scenarios shared by the integration and acceptance targets.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use docflow::clock::{secs, Clock, ScaledClock};
use docflow::domain::{BlobKey, DocState, DocumentId, Step};
use docflow::gateway::{run_ingestion, ArrivalPattern, CrashPoint, GatewayError, Submission, SubmissionSource};
use docflow::inference::{InferenceClient, InferenceError, InferenceRequest, InferenceResponse};
use docflow::stack::Stack;
use docflow::worker::{process_lease, EventKind, ProcessOutcome};
use docflow::worldgen::{generate_corpus, Calibration, CorpusSpec, PagesDistribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use docflow::{PipelineConfig, Timestamp};

/// Delays the first call it forwards, as if the first inference request
/// were stuck on the service side.
pub struct SlowFirstCall {
    pub inner: Arc<dyn InferenceClient>,
    pub clock: Arc<ScaledClock>,
    pub delay: Duration,
    fired: AtomicBool,
}

impl SlowFirstCall {
    pub fn new(inner: Arc<dyn InferenceClient>, clock: Arc<ScaledClock>, delay: Duration) -> Self {
        SlowFirstCall { inner, clock, delay, fired: AtomicBool::new(false) }
    }
}

#[async_trait]
impl InferenceClient for SlowFirstCall {
    async fn call(&self, request: InferenceRequest) -> Result<InferenceResponse, InferenceError> {
        if !self.fired.swap(true, Ordering::SeqCst) {
            self.clock.sleep(self.delay).await;
        }
        self.inner.call(request).await
    }
}

pub fn stale_config(threshold: f64) -> PipelineConfig {
    let mut c = PipelineConfig::default_config();
    c.worker.stale_threshold = threshold;
    c.worker.sweep_interval = 5.0;
    c.queue.visibility_timeout = 1_000.0;
    c
}

#[derive(Debug)]
pub struct LeasedWait {
    pub waited: f64,
    pub stale_events: usize,
    pub ever_stale: bool,
    pub final_state: Option<DocState>,
}

/// Holds a lease on a document for `wait` model seconds without calling
/// inference (sweeper running), then processes it to completion.
pub async fn leased_wait_without_inference(root: &std::path::Path, threshold: f64, wait: f64) -> LeasedWait {
    let cfg = stale_config(threshold);
    let cal = Calibration::default();
    let stack = Stack::open(root, cfg.clone(), cal.clone()).unwrap();
    stack.start_sweeper();
    let corpus = generate_corpus(&CorpusSpec::new(1, 9), &cfg, &cal).unwrap();
    let id = stack.submit_corpus(&corpus).unwrap().remove(0);
    let lease = stack.queue.receive("pod-local", cfg.visibility_timeout()).unwrap().expect("message visible");
    let start = stack.clock.now().as_secs_f64();
    let mut ever_stale = false;
    while stack.clock.now().as_secs_f64() - start < wait {
        stack.clock.sleep(secs(1.0)).await;
        ever_stale |= matches!(stack.state_of(&id), Some(DocState::Stale(_)));
    }
    let waited = stack.clock.now().as_secs_f64() - start;
    let outcome = process_lease(&stack.worker_context(), "pod-local", lease).await;
    assert!(matches!(outcome, ProcessOutcome::Completed { .. }), "{outcome:?}");
    let stale_events = stack.events.count(|k| matches!(k, EventKind::StaleDetected { .. }));
    let final_state = stack.state_of(&id);
    stack.shutdown().await;
    LeasedWait { waited, stale_events, ever_stale, final_state }
}

#[derive(Debug)]
pub struct SlowStart {
    pub processing_start_time: Option<Timestamp>,
    pub detected_at: Option<Timestamp>,
    pub sweep_interval: f64,
    pub final_state: Option<DocState>,
}

impl SlowStart {
    /// Seconds between crossing the threshold and being marked stale.
    pub fn detection_lag(&self, threshold: f64) -> Option<f64> {
        Some(self.detected_at?.as_secs_f64() - (self.processing_start_time?.as_secs_f64() + threshold))
    }
}

/// A pod whose first inference call takes `delay` model seconds.
pub async fn slow_first_inference(root: &std::path::Path, threshold: f64, delay: f64) -> SlowStart {
    let cfg = stale_config(threshold);
    let cal = Calibration::default();
    let mut stack = Stack::open(root, cfg.clone(), cal.clone()).unwrap();
    let slow = SlowFirstCall::new(stack.inference.clone(), stack.clock.clone(), secs(delay));
    stack.set_inference_client(Arc::new(slow));
    stack.start_sweeper();
    let corpus = generate_corpus(&CorpusSpec::new(1, 9), &cfg, &cal).unwrap();
    let ids: Vec<DocumentId> = stack.submit_corpus(&corpus).unwrap();
    stack.spawn_pods(1, 1);
    assert!(stack.wait_until_terminal(&ids, secs(delay + 600.0)).await);
    let events = stack.events.for_document(&ids[0]);
    let detected_at = events.iter().find(|e| matches!(e.kind, EventKind::StaleDetected { .. })).map(|e| e.at);
    let processing_start_time = stack.store.tracking.get(&ids[0]).unwrap().status.processing_start_time;
    let final_state = stack.state_of(&ids[0]);
    stack.shutdown().await;
    SlowStart { processing_start_time, detected_at, sweep_interval: cfg.worker.sweep_interval, final_state }
}

#[derive(Debug)]
pub struct ResumeRun {
    pub result: Vec<u8>,
    /// StepStarted count per step over the document's whole history.
    pub starts: std::collections::BTreeMap<Step, usize>,
    pub skipped: Vec<Step>,
    pub crashed: bool,
    pub leases: usize,
}

/// Processes one seeded document, optionally killing its executor right
/// after `crash_after` is checkpointed. The lease then has to expire before
/// the document is redelivered and resumed.
pub async fn crash_and_resume(root: &std::path::Path, seed: u64, crash_after: Option<Step>) -> ResumeRun {
    let mut cfg = PipelineConfig::default_config();
    cfg.queue.visibility_timeout = 60.0;
    let cal = Calibration::default();
    let stack = Stack::open(root, cfg.clone(), cal.clone()).unwrap();
    stack.start_sweeper();
    let corpus = generate_corpus(&CorpusSpec::new(1, seed), &cfg, &cal).unwrap();
    let id = corpus[0].document.id.clone();
    if let Some(step) = crash_after {
        stack.crash.crash_after(Some(id.clone()), step, 1);
    }
    stack.submit_corpus(&corpus).unwrap();
    stack.spawn_pods(1, 1);
    assert!(stack.wait_until_terminal(std::slice::from_ref(&id), secs(1_000.0)).await);
    assert_eq!(stack.state_of(&id), Some(DocState::Completed));
    let result = stack.store.blobs.get(&BlobKey::result(&id)).unwrap().bytes;
    let events = stack.events.for_document(&id);
    stack.shutdown().await;

    let mut starts = std::collections::BTreeMap::new();
    let mut skipped = Vec::new();
    let (mut crashed, mut leases) = (false, 0);
    for e in &events {
        match &e.kind {
            EventKind::StepStarted { step, .. } => *starts.entry(*step).or_insert(0) += 1,
            EventKind::StepSkipped { step } => skipped.push(*step),
            EventKind::Crashed { .. } => crashed = true,
            EventKind::LeaseAcquired { .. } => leases += 1,
            _ => {}
        }
    }
    ResumeRun { result, starts, skipped, crashed, leases }
}

#[derive(Debug)]
pub struct GatewayStop {
    pub accepted: usize,
    pub refused: usize,
    pub completed: usize,
    pub queue_empty: bool,
}

/// Streams `n_docs` at a steady rate, stops the gateway at `stop_at` model
/// seconds and lets the pods drain what was accepted.
pub async fn gateway_stop_mid_batch(root: &std::path::Path, n_docs: usize, stop_at: f64) -> GatewayStop {
    let cfg = PipelineConfig::default_config();
    let cal = Calibration::default();
    let stack = Stack::open(root, cfg.clone(), cal.clone()).unwrap();
    stack.start_sweeper();
    stack.spawn_pods(2, 3);
    let corpus = generate_corpus(&CorpusSpec::new(n_docs, 3), &cfg, &cal).unwrap();
    let stopper = {
        let (gw, clock) = (stack.gateway.clone(), stack.clock.clone());
        tokio::spawn(async move {
            clock.sleep(secs(stop_at)).await;
            gw.stop();
        })
    };
    let arrivals = run_ingestion(&stack.gateway, &ArrivalPattern::Steady { rate: 0.5 }, &corpus).await;
    stopper.await.unwrap();
    let accepted: Vec<_> = arrivals.iter().filter(|a| a.result.is_ok()).map(|a| a.document_id.clone()).collect();
    let refused = arrivals.iter().filter(|a| a.result == Err(GatewayError::Stopped)).count();
    stack.wait_until_terminal(&accepted, secs(5_000.0)).await;
    let completed = accepted.iter().filter(|id| stack.state_of(id) == Some(DocState::Completed)).count();
    let queue_empty = stack.queue.is_empty();
    stack.shutdown().await;
    GatewayStop { accepted: accepted.len(), refused, completed, queue_empty }
}

#[derive(Debug)]
pub struct FaultRun {
    pub submissions: usize,
    pub crashed: usize,
    pub max_orphans: usize,
    pub enqueued: usize,
    pub completed: usize,
    pub leases: usize,
}

/// `n` submissions, each with a random gateway crash point (or none);
/// orphan queue entries are counted after every submission. The surviving
/// documents are then processed.
pub async fn fault_submissions(root: &std::path::Path, n: usize, seed: u64) -> FaultRun {
    let cfg = PipelineConfig::default_config();
    let cal = Calibration::default();
    let stack = Stack::open(root, cfg.clone(), cal.clone()).unwrap();
    let corpus = generate_corpus(&CorpusSpec::new(n, seed).with_pages(PagesDistribution::Fixed(3)), &cfg, &cal).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut ok, mut crashed, mut max_orphans) = (Vec::new(), 0, 0);
    for doc in &corpus {
        let point = match rng.random_range(0..5) {
            0 => None,
            1 => Some(CrashPoint::AfterRecord),
            2 => Some(CrashPoint::AfterPages(rng.random_range(0..3))),
            3 => Some(CrashPoint::AfterBlobs),
            _ => Some(CrashPoint::AfterValidated),
        };
        stack.gateway.set_crash_point(point);
        match stack.gateway.submit(Submission::from_synthetic(doc, SubmissionSource::Api)) {
            Ok(r) => ok.push(r.document_id),
            Err(GatewayError::Crashed(_)) => crashed += 1,
            Err(e) => panic!("unexpected gateway error {e}"),
        }
        max_orphans = max_orphans.max(super::orphan_entries(&stack));
    }
    stack.gateway.set_crash_point(None);
    let enqueued = stack.queue.depth().visible;
    stack.spawn_pods(2, 4);
    stack.wait_until_terminal(&ok, secs(10_000.0)).await;
    let completed = ok.iter().filter(|id| stack.state_of(id) == Some(DocState::Completed)).count();
    let leases = stack.events.count(|k| matches!(k, EventKind::LeaseAcquired { .. }));
    stack.shutdown().await;
    FaultRun { submissions: n, crashed, max_orphans, enqueued, completed, leases }
}
