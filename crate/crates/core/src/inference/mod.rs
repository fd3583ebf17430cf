//! The inference service: classify, OCR, detect and parse operations over
//! simulated backends, behind two capacity limiters.
//!
//! GPU-class ops (clip, ocr, detector) share `gpu_slots`; API-class ops
//! (vlm classify, vlm detect, parse) share `api_concurrency`. Both limiters
//! are FIFO, so requests of a class start in arrival order. A request's
//! `started_at - queued_at` is its queue wait and `finished_at - started_at`
//! is exactly the sampled service time.

pub mod http;
mod limiter;

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{Clock, ScaledClock, Timestamp};
use crate::domain::{BlobKey, CostEntry, DetectBackend, DocumentId, PipelineConfig, Step};
use crate::store::{BlobStore, StoreError};
use crate::worldgen::{
    sample_classifier_outcome, sample_detection, sample_latency, sample_ocr, sample_parse_latency, sample_parse_outcome,
    substream, Calibration, CoverMetadata, SampleKey, SyntheticPage, WorldError,
};

pub use crate::worldgen::{OcrResult, OcrWord};
pub use http::{router, serve, HttpInferenceClient};
pub use limiter::{CapacityClass, Limiter, LimiterStats};

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
#[serde(tag = "error", content = "message", rename_all = "snake_case")]
pub enum InferenceError {
    #[error("not found: {0}")]
    NotFound(String),
    #[error("page {0} is not a cover page")]
    NotACoverPage(u32),
    #[error("empty input")]
    EmptyInput,
    #[error("schema violation: {0}")]
    SchemaViolation(String),
    #[error("overloaded: {0}")]
    Overloaded(String),
    #[error("unavailable: {0}")]
    Unavailable(String),
    #[error("bad request: {0}")]
    BadRequest(String),
}

impl InferenceError {
    /// Transient errors are retried at the service boundary.
    pub fn is_transient(&self) -> bool {
        matches!(self, InferenceError::Overloaded(_) | InferenceError::Unavailable(_))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    ClassifyClip,
    ClassifyVlm,
    Ocr,
    DetectDetector,
    DetectVlm,
    Parse,
}

impl Op {
    pub const ALL: [Op; 6] = [Op::ClassifyClip, Op::ClassifyVlm, Op::Ocr, Op::DetectDetector, Op::DetectVlm, Op::Parse];

    pub fn as_str(self) -> &'static str {
        match self {
            Op::ClassifyClip => "classify_clip",
            Op::ClassifyVlm => "classify_vlm",
            Op::Ocr => "ocr",
            Op::DetectDetector => "detect_detector",
            Op::DetectVlm => "detect_vlm",
            Op::Parse => "parse",
        }
    }

    /// Pipeline step that issues this op.
    pub fn step(self) -> Step {
        match self {
            Op::ClassifyClip | Op::ClassifyVlm => Step::Classify,
            Op::DetectDetector | Op::DetectVlm => Step::Metadata,
            Op::Ocr => Step::Ocr,
            Op::Parse => Step::Parse,
        }
    }

    pub fn class(self) -> CapacityClass {
        match self {
            Op::ClassifyClip | Op::Ocr | Op::DetectDetector => CapacityClass::Gpu,
            Op::ClassifyVlm | Op::DetectVlm | Op::Parse => CapacityClass::Api,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum InferenceRequest {
    ClassifyClip { document_id: DocumentId, page_index: u32, page_key: BlobKey },
    ClassifyVlm { document_id: DocumentId, page_index: u32, page_key: BlobKey },
    Ocr { document_id: DocumentId, page_index: u32, page_key: BlobKey },
    Detect { document_id: DocumentId, page_index: u32, page_key: BlobKey, backend: DetectBackend },
    Parse { document_id: DocumentId, text: String, schema: Vec<String> },
}

impl InferenceRequest {
    pub fn op(&self) -> Op {
        match self {
            InferenceRequest::ClassifyClip { .. } => Op::ClassifyClip,
            InferenceRequest::ClassifyVlm { .. } => Op::ClassifyVlm,
            InferenceRequest::Ocr { .. } => Op::Ocr,
            InferenceRequest::Detect { backend: DetectBackend::Detector, .. } => Op::DetectDetector,
            InferenceRequest::Detect { backend: DetectBackend::Vlm, .. } => Op::DetectVlm,
            InferenceRequest::Parse { .. } => Op::Parse,
        }
    }

    pub fn document_id(&self) -> &DocumentId {
        match self {
            InferenceRequest::ClassifyClip { document_id, .. }
            | InferenceRequest::ClassifyVlm { document_id, .. }
            | InferenceRequest::Ocr { document_id, .. }
            | InferenceRequest::Detect { document_id, .. }
            | InferenceRequest::Parse { document_id, .. } => document_id,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InferenceResult {
    Classification { label: String, confidence: f64 },
    Ocr(OcrResult),
    Metadata(CoverMetadata),
    Parse { fields: BTreeMap<String, String>, input_tokens: u64, output_tokens: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CallTiming {
    pub queued_at: Timestamp,
    pub started_at: Timestamp,
    pub finished_at: Timestamp,
}

impl CallTiming {
    pub fn queue_wait(&self) -> Duration {
        self.started_at.saturating_since(self.queued_at)
    }

    pub fn service_time(&self) -> Duration {
        self.finished_at.saturating_since(self.started_at)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InferenceResponse {
    pub op: Op,
    pub result: InferenceResult,
    pub timing: CallTiming,
    pub cost: CostEntry,
}

/// The worker-facing contract; in-process and HTTP clients both implement it.
#[async_trait]
pub trait InferenceClient: Send + Sync {
    async fn call(&self, request: InferenceRequest) -> Result<InferenceResponse, InferenceError>;
}

// ---------------------------------------------------------------------------
// Stats
// ---------------------------------------------------------------------------

const HISTOGRAM_BOUNDS: [f64; 10] = [0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0, 16.0, 32.0, 64.0];

/// Service-time histogram in model seconds. `counts[i]` holds samples
/// `<= bounds[i]`; the final bucket is unbounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bounds: Vec<f64>,
    pub counts: Vec<u64>,
    pub count: u64,
    pub sum: f64,
}

impl Default for Histogram {
    fn default() -> Self {
        Histogram { bounds: HISTOGRAM_BOUNDS.to_vec(), counts: vec![0; HISTOGRAM_BOUNDS.len() + 1], count: 0, sum: 0.0 }
    }
}

impl Histogram {
    pub fn record(&mut self, secs: f64) {
        let i = self.bounds.iter().position(|b| secs <= *b).unwrap_or(self.bounds.len());
        self.counts[i] += 1;
        self.count += 1;
        self.sum += secs;
    }

    pub fn mean(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sum / self.count as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceStats {
    pub in_flight: usize,
    pub queue_length: usize,
    /// GPU slot utilization since start.
    pub slot_utilization: f64,
    pub gpu: LimiterStats,
    pub api: LimiterStats,
    pub histograms: BTreeMap<String, Histogram>,
    pub calls: u64,
    pub total_cost: f64,
}

// ---------------------------------------------------------------------------
// Service
// ---------------------------------------------------------------------------

pub struct InferenceService {
    blobs: Arc<BlobStore>,
    clock: Arc<ScaledClock>,
    calibration: Calibration,
    labels: Vec<String>,
    seed: u64,
    malformed_probability: f64,
    gpu: Limiter,
    api: Limiter,
    ledger: Mutex<Vec<CostEntry>>,
    histograms: Mutex<BTreeMap<String, Histogram>>,
    parse_calls: Mutex<HashMap<DocumentId, u32>>,
    calls: AtomicU64,
    available: AtomicBool,
}

impl InferenceService {
    pub fn new(config: &PipelineConfig, calibration: Calibration, blobs: Arc<BlobStore>, clock: Arc<ScaledClock>) -> Self {
        let inf = &config.inference;
        let dyn_clock: Arc<dyn Clock> = clock.clone();
        InferenceService {
            blobs,
            calibration,
            labels: config.labels(),
            seed: config.profiler.seed,
            malformed_probability: inf.malformed_output_probability,
            gpu: Limiter::new(CapacityClass::Gpu, inf.gpu_slots, inf.max_wait_queue, dyn_clock.clone()),
            api: Limiter::new(CapacityClass::Api, inf.api_concurrency, inf.max_wait_queue, dyn_clock),
            clock,
            ledger: Mutex::new(Vec::new()),
            histograms: Mutex::new(BTreeMap::new()),
            parse_calls: Mutex::new(HashMap::new()),
            calls: AtomicU64::new(0),
            available: AtomicBool::new(true),
        }
    }

    pub fn calibration(&self) -> &Calibration {
        &self.calibration
    }

    pub fn limiter(&self, class: CapacityClass) -> &Limiter {
        match class {
            CapacityClass::Gpu => &self.gpu,
            CapacityClass::Api => &self.api,
        }
    }

    /// Simulates an outage: every call fails with `Unavailable` until restored.
    pub fn set_available(&self, available: bool) {
        self.available.store(available, Ordering::SeqCst);
    }

    pub fn ledger(&self) -> Vec<CostEntry> {
        self.ledger.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn document_cost(&self, id: &DocumentId) -> f64 {
        self.ledger.lock().unwrap_or_else(|e| e.into_inner()).iter().filter(|e| &e.document_id == id).map(|e| e.unit_cost).sum()
    }

    pub fn service_stats(&self) -> ServiceStats {
        let gpu = self.gpu.stats();
        let api = self.api.stats();
        ServiceStats {
            in_flight: gpu.executing + api.executing,
            queue_length: gpu.waiting + api.waiting,
            slot_utilization: gpu.utilization,
            gpu,
            api,
            histograms: self.histograms.lock().unwrap_or_else(|e| e.into_inner()).clone(),
            calls: self.calls.load(Ordering::Relaxed),
            total_cost: self.ledger.lock().unwrap_or_else(|e| e.into_inner()).iter().map(|e| e.unit_cost).sum(),
        }
    }

    fn load_page(&self, key: &BlobKey) -> Result<SyntheticPage, InferenceError> {
        let blob = self.blobs.get(key).map_err(|e| match e {
            StoreError::NotFound(k) => InferenceError::NotFound(k),
            other => InferenceError::Unavailable(other.to_string()),
        })?;
        SyntheticPage::from_blob(&blob.bytes).map_err(|e| InferenceError::BadRequest(e.to_string()))
    }

    pub async fn handle(&self, request: InferenceRequest) -> Result<InferenceResponse, InferenceError> {
        if !self.available.load(Ordering::SeqCst) {
            return Err(InferenceError::Unavailable("inference service is down".into()));
        }
        self.calls.fetch_add(1, Ordering::Relaxed);
        let op = request.op();
        let cal = &self.calibration;
        let doc = request.document_id().clone();

        // Input validation and blob download happen before queueing for a slot.
        let (page, words) = match &request {
            InferenceRequest::Parse { text, schema, .. } => {
                let words: Vec<String> = text.split_whitespace().map(str::to_owned).collect();
                if words.is_empty() {
                    return Err(InferenceError::EmptyInput);
                }
                if schema.is_empty() {
                    return Err(InferenceError::BadRequest("empty field schema".into()));
                }
                (None, words)
            }
            InferenceRequest::ClassifyClip { page_key, .. }
            | InferenceRequest::ClassifyVlm { page_key, .. }
            | InferenceRequest::Ocr { page_key, .. }
            | InferenceRequest::Detect { page_key, .. } => (Some(self.load_page(page_key)?), Vec::new()),
        };
        if let (InferenceRequest::Detect { page_index, .. }, Some(p)) = (&request, &page) {
            if !p.cover {
                return Err(InferenceError::NotACoverPage(*page_index));
            }
        }

        let profile = match op {
            Op::ClassifyClip => &cal.clip,
            Op::ClassifyVlm => &cal.vlm_classify,
            Op::Ocr => &cal.ocr,
            Op::DetectDetector => &cal.detector,
            Op::DetectVlm => &cal.vlm_detect,
            Op::Parse => &cal.parse,
        };
        let service_time = match &page {
            Some(p) => sample_latency(
                op.as_str(),
                profile,
                SampleKey { document_id: &doc, page_index: Some(p.page_index) },
                self.seed,
                1.0,
            ),
            None => sample_parse_latency(profile, &doc, words.len(), self.seed),
        };

        let queued_at = self.clock.now();
        let guard = self.limiter(op.class()).acquire().await?;
        let started_at = self.clock.now();
        let finished_at = started_at + service_time;
        self.clock.sleep_until(finished_at).await;
        drop(guard);

        let mut cost = CostEntry::flat(&doc, op.as_str(), profile.unit_cost);
        let result = match (&request, page) {
            (InferenceRequest::ClassifyClip { .. } | InferenceRequest::ClassifyVlm { .. }, Some(p)) => {
                let o = sample_classifier_outcome(&p, profile, &cal.confidence, &self.labels, self.seed);
                InferenceResult::Classification { label: o.label, confidence: o.confidence }
            }
            (InferenceRequest::Ocr { .. }, Some(p)) => InferenceResult::Ocr(sample_ocr(&p, cal, self.seed)),
            (InferenceRequest::Detect { .. }, Some(p)) => {
                InferenceResult::Metadata(sample_detection(&p, profile, self.seed).map_err(world_error)?)
            }
            (InferenceRequest::Parse { schema, .. }, None) => {
                let nth = {
                    let mut calls = self.parse_calls.lock().unwrap_or_else(|e| e.into_inner());
                    let n = calls.entry(doc.clone()).or_insert(0);
                    *n += 1;
                    *n
                };
                if self.malformed_probability > 0.0 {
                    let mut rng = substream(self.seed, &doc, Some(nth), "parse:malformed");
                    if rng.random::<f64>() < self.malformed_probability {
                        return Err(InferenceError::SchemaViolation("model output is not valid against the schema".into()));
                    }
                }
                let o = sample_parse_outcome(&doc, &words, schema, profile, self.seed).map_err(world_error)?;
                validate_fields(&o.fields, schema)?;
                cost.unit_cost = o.cost;
                cost.input_tokens = Some(o.input_tokens);
                cost.output_tokens = Some(o.output_tokens);
                InferenceResult::Parse { fields: o.fields, input_tokens: o.input_tokens, output_tokens: o.output_tokens }
            }
            _ => unreachable!("page presence matches request kind"),
        };

        self.ledger.lock().unwrap_or_else(|e| e.into_inner()).push(cost.clone());
        self.histograms
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .entry(op.as_str().to_owned())
            .or_default()
            .record(service_time.as_secs_f64());
        Ok(InferenceResponse { op, result, timing: CallTiming { queued_at, started_at, finished_at }, cost })
    }
}

fn world_error(e: WorldError) -> InferenceError {
    match e {
        WorldError::EmptyInput => InferenceError::EmptyInput,
        WorldError::NotACoverPage(p) => InferenceError::NotACoverPage(p),
        WorldError::BadPayload(m) => InferenceError::BadRequest(m),
    }
}

/// Every schema field must be present, and nothing else.
pub fn validate_fields(fields: &BTreeMap<String, String>, schema: &[String]) -> Result<(), InferenceError> {
    if fields.len() != schema.len() || schema.iter().any(|f| !fields.contains_key(f)) {
        return Err(InferenceError::SchemaViolation(format!("expected fields {schema:?}")));
    }
    Ok(())
}

#[async_trait]
impl InferenceClient for InferenceService {
    async fn call(&self, request: InferenceRequest) -> Result<InferenceResponse, InferenceError> {
        self.handle(request).await
    }
}

#[async_trait]
impl<T: InferenceClient + ?Sized> InferenceClient for Arc<T> {
    async fn call(&self, request: InferenceRequest) -> Result<InferenceResponse, InferenceError> {
        (**self).call(request).await
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_corpus, CorpusSpec, Difficulty};

    struct Fixture {
        _dir: tempfile::TempDir,
        service: Arc<InferenceService>,
        corpus: Vec<crate::worldgen::SyntheticDocument>,
        clock: Arc<ScaledClock>,
    }

    fn fixture(tweak: impl FnOnce(&mut PipelineConfig)) -> Fixture {
        let mut config = PipelineConfig::default_config();
        tweak(&mut config);
        let dir = tempfile::tempdir().unwrap();
        let blobs = Arc::new(BlobStore::open(dir.path()).unwrap());
        let cal = Calibration::default();
        let corpus = generate_corpus(&CorpusSpec::new(4, 7), &config, &cal).unwrap();
        for d in &corpus {
            for (p, bytes) in d.document.pages.iter().zip(d.page_blobs()) {
                blobs.put(&p.blob_key, &bytes).unwrap();
            }
        }
        let clock = Arc::new(ScaledClock::new(0.01));
        let service = Arc::new(InferenceService::new(&config, cal, blobs, clock.clone()));
        Fixture { _dir: dir, service, corpus, clock }
    }

    fn ocr_req(d: &crate::worldgen::SyntheticDocument, i: usize) -> InferenceRequest {
        let p = &d.document.pages[i];
        InferenceRequest::Ocr { document_id: p.document_id.clone(), page_index: p.page_index, page_key: p.blob_key.clone() }
    }

    #[tokio::test(start_paused = true)]
    async fn idle_service_stats_are_empty() {
        let f = fixture(|_| {});
        let s = f.service.service_stats();
        assert_eq!((s.in_flight, s.queue_length), (0, 0));
        assert_eq!(s.slot_utilization, 0.0);
        assert!(s.histograms.is_empty());
    }

    #[tokio::test(start_paused = true)]
    async fn ocr_returns_words_in_order_with_range_bound_service_time() {
        let f = fixture(|_| {});
        let d = &f.corpus[0];
        let r = f.service.call(ocr_req(d, 0)).await.unwrap();
        let InferenceResult::Ocr(ocr) = &r.result else { panic!("ocr result") };
        assert_eq!(ocr.words.len(), d.pages[0].true_text.len());
        assert!(ocr.words.iter().zip(&d.pages[0].true_text).all(|(w, t)| &w.text == t));
        let st = r.timing.service_time().as_secs_f64();
        assert!((1.0..=2.0).contains(&st), "{st}");
        assert_eq!(r.cost.unit_cost, 0.0);
        let again = f.service.call(ocr_req(d, 0)).await.unwrap();
        assert_eq!(again.result, r.result);
    }

    #[tokio::test(start_paused = true)]
    async fn classification_costs_and_missing_blobs() {
        let f = fixture(|_| {});
        let d = &f.corpus[0];
        let p = &d.document.pages[0];
        let clip = f
            .service
            .call(InferenceRequest::ClassifyClip { document_id: d.document.id.clone(), page_index: 0, page_key: p.blob_key.clone() })
            .await
            .unwrap();
        assert_eq!(clip.cost.unit_cost, 0.0);
        if let (Difficulty::Easy, InferenceResult::Classification { confidence, .. }) = (d.pages[0].difficulty, &clip.result) {
            assert!(*confidence >= 0.7);
        }
        let vlm = f
            .service
            .call(InferenceRequest::ClassifyVlm { document_id: d.document.id.clone(), page_index: 0, page_key: p.blob_key.clone() })
            .await
            .unwrap();
        assert_eq!(vlm.cost.unit_cost, 0.01);
        let missing = f
            .service
            .call(InferenceRequest::ClassifyClip { document_id: d.document.id.clone(), page_index: 99, page_key: BlobKey::new("nope") })
            .await;
        assert!(matches!(missing, Err(InferenceError::NotFound(_))));
    }

    #[tokio::test(start_paused = true)]
    async fn detect_requires_cover_and_vlm_costs_more() {
        let f = fixture(|_| {});
        let d = &f.corpus[1];
        let req = |i: usize, backend| InferenceRequest::Detect {
            document_id: d.document.id.clone(),
            page_index: i as u32,
            page_key: d.document.pages[i].blob_key.clone(),
            backend,
        };
        let det = f.service.call(req(0, DetectBackend::Detector)).await.unwrap();
        let vlm = f.service.call(req(0, DetectBackend::Vlm)).await.unwrap();
        assert!(vlm.cost.unit_cost > det.cost.unit_cost);
        assert!(det.timing.service_time() < vlm.timing.service_time());
        assert_eq!(f.service.call(req(1, DetectBackend::Detector)).await.unwrap_err(), InferenceError::NotACoverPage(1));
    }

    #[tokio::test(start_paused = true)]
    async fn parse_anchor_and_errors() {
        let f = fixture(|_| {});
        let d = &f.corpus[0];
        let text = d.pages.iter().flat_map(|p| p.true_text.clone()).collect::<Vec<_>>().join(" ");
        let schema: Vec<String> = d.true_fields.keys().cloned().collect();
        let r = f
            .service
            .call(InferenceRequest::Parse { document_id: d.document.id.clone(), text: text.clone(), schema: schema.clone() })
            .await
            .unwrap();
        let InferenceResult::Parse { fields, input_tokens, output_tokens } = &r.result else { panic!() };
        assert_eq!(fields.len(), schema.len());
        let words = d.word_count() as f64;
        assert!((*input_tokens as f64 - 4500.0 * words / 960.0).abs() <= 1.0);
        assert!((*output_tokens as f64 - 400.0 * words / 960.0).abs() <= 1.0);
        assert!((r.cost.unit_cost - 0.03 * words / 960.0).abs() < 1e-4);
        let empty =
            f.service.call(InferenceRequest::Parse { document_id: d.document.id.clone(), text: "  ".into(), schema }).await;
        assert_eq!(empty.unwrap_err(), InferenceError::EmptyInput);
    }

    #[tokio::test(start_paused = true)]
    async fn forced_malformed_output_always_violates_schema() {
        let f = fixture(|c| c.inference.malformed_output_probability = 1.0);
        let d = &f.corpus[0];
        for _ in 0..5 {
            let r = f
                .service
                .call(InferenceRequest::Parse { document_id: d.document.id.clone(), text: "a b".into(), schema: vec!["x".into()] })
                .await;
            assert!(matches!(r, Err(InferenceError::SchemaViolation(_))));
        }
    }

    #[tokio::test(start_paused = true)]
    async fn single_slot_queues_concurrent_ocr_fifo() {
        let f = fixture(|c| c.inference.gpu_slots = 1);
        let d = f.corpus[0].clone();
        let mut handles = Vec::new();
        for i in 0..3 {
            let svc = f.service.clone();
            let req = ocr_req(&d, i);
            handles.push(tokio::spawn(async move { svc.call(req).await.unwrap() }));
            tokio::task::yield_now().await;
        }
        // Let the first request start.
        f.clock.sleep(Duration::from_millis(500)).await;
        let s = f.service.service_stats();
        assert_eq!(s.gpu.executing, 1);
        assert_eq!(s.queue_length, 2);
        let mut timings = Vec::new();
        for h in handles {
            timings.push(h.await.unwrap().timing);
        }
        for w in timings.windows(2) {
            assert!(w[0].queued_at <= w[1].queued_at);
            assert!(w[0].started_at <= w[1].started_at);
            assert!(w[1].started_at >= w[0].finished_at);
        }
        assert_eq!(f.service.service_stats().gpu.peak_executing, 1);
    }

    #[tokio::test(start_paused = true)]
    async fn outage_is_unavailable() {
        let f = fixture(|_| {});
        f.service.set_available(false);
        let e = f.service.call(ocr_req(&f.corpus[0], 0)).await.unwrap_err();
        assert!(e.is_transient());
    }

    #[test]
    fn histogram_buckets() {
        let mut h = Histogram::default();
        h.record(0.05);
        h.record(1.5);
        h.record(100.0);
        assert_eq!(h.counts[0], 1);
        assert_eq!(h.counts[4], 1);
        assert_eq!(*h.counts.last().unwrap(), 1);
        assert_eq!(h.count, 3);
    }
}
