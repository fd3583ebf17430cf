//! Batch experiment driver and metrics.
//!
//! A run builds a fresh stack, pushes a seeded corpus through it at one
//! worker concurrency level and derives every metric from the worker event
//! log, the tracking store and the inference limiters after quiescence.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{secs, Timestamp};
use crate::domain::{ConfigError, DocState, DocumentId, PipelineConfig, Step};
use crate::gateway::{run_ingestion, ArrivalPattern, GatewayError};
use crate::inference::{CapacityClass, Op};
use crate::stack::{Stack, StackError};
use crate::worker::{Event, EventKind};
use crate::worldgen::{
    classification_monte_carlo, generate_corpus, Calibration, ClassificationStats, CorpusSpec, LabelDistribution, PagesDistribution,
};

// Bottleneck thresholds. A document is "blocked" on a capacity class while
// it has a request of that class waiting for a slot and nothing executing;
// blocked shares are fractions of per-document wall time.
pub const GPU_UTIL_SATURATED: f64 = 0.95;
pub const BLOCKED_DOMINANT: f64 = 0.10;
pub const BLOCKED_NEGLIGIBLE: f64 = 0.05;
pub const WORKER_OCCUPANCY_MIN: f64 = 0.90;

#[derive(Debug, Error)]
pub enum ProfilerError {
    #[error("no samples")]
    EmptySamples,
    #[error("quantile {0} outside (0, 1)")]
    InvalidQuantile(f64),
    #[error("no report rows")]
    EmptyReport,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Stack(#[from] StackError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error("level {level} seed {seed}: {completed}/{total} documents terminal before timeout")]
    Timeout { level: usize, seed: u64, completed: usize, total: usize, partial: Box<RunMetrics> },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Nearest-rank quantile: the value at 1-based rank ⌈q·n⌉ of the sorted samples.
pub fn p_quantile(samples: &[f64], q: f64) -> Result<f64, ProfilerError> {
    if samples.is_empty() {
        return Err(ProfilerError::EmptySamples);
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(ProfilerError::InvalidQuantile(q));
    }
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let rank = (q * s.len() as f64).ceil() as usize;
    Ok(s[rank.clamp(1, s.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClockMode {
    /// Tokio clock follows the wall clock (scaled by `time_scale`).
    Real,
    /// Paused tokio clock that jumps to the next timer whenever every task
    /// is idle. Same code paths, no wall-clock waiting.
    Virtual,
}

impl ClockMode {
    pub fn runtime(self) -> std::io::Result<tokio::runtime::Runtime> {
        match self {
            ClockMode::Real => tokio::runtime::Builder::new_multi_thread().enable_all().build(),
            ClockMode::Virtual => tokio::runtime::Builder::new_current_thread().enable_all().start_paused(true).build(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentPlan {
    pub config: PipelineConfig,
    pub calibration: Calibration,
    pub n_docs: usize,
    pub pages: PagesDistribution,
    pub labels: LabelDistribution,
    /// Worker concurrency levels (pods × tasks per pod).
    pub levels: Vec<usize>,
    pub seeds: Vec<u64>,
    pub arrival: ArrivalPattern,
    pub clock: ClockMode,
    /// Directory for per-run stores; a temp dir when `None`.
    pub work_dir: Option<PathBuf>,
    pub keep_event_logs: bool,
}

impl ExperimentPlan {
    pub fn new(config: PipelineConfig) -> Self {
        let calibration = Calibration::for_config(&config);
        ExperimentPlan {
            config,
            calibration,
            n_docs: 300,
            pages: PagesDistribution::Fixed(8),
            labels: LabelDistribution::default(),
            levels: vec![1, 2, 5, 10, 25, 50],
            seeds: (1..=5).collect(),
            arrival: ArrivalPattern::Batch,
            clock: ClockMode::Virtual,
            work_dir: None,
            keep_event_logs: false,
        }
    }

    pub fn saturation(&self) -> Saturation {
        Saturation::analytic(&self.config, &self.calibration, self.pages.mean())
    }
}

/// `level` worker slots as pods × tasks: whole pods of the configured size
/// when divisible, otherwise one pod with `level` tasks.
pub fn level_layout(level: usize, tasks_per_pod: usize) -> (usize, usize) {
    let t = tasks_per_pod.max(1);
    if level >= t && level.is_multiple_of(t) {
        (level / t, t)
    } else {
        (1, level.max(1))
    }
}

/// Analytic saturation point of the GPU class.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Saturation {
    pub gpu_seconds_per_doc: f64,
    /// Docs/s the GPU slots can sustain.
    pub ceiling: f64,
    /// Expected uncontended wall time of one document.
    pub wall_per_doc: f64,
    /// Concurrency at which offered GPU load meets the ceiling.
    pub c_sat: f64,
}

impl Saturation {
    pub fn analytic(config: &PipelineConfig, cal: &Calibration, pages: f64) -> Self {
        let slots = config.inference.gpu_slots as f64;
        let gpu_seconds_per_doc = cal.mean_gpu_seconds(pages);
        let ceiling = slots / gpu_seconds_per_doc;
        let labels = config.labels();
        let fallback = classification_monte_carlo(20_000, 0, cal, config.worker.clip_confidence_threshold, &labels).fallback_rate;
        let fanout = match config.worker.classify_fanout {
            0 => pages,
            k => k as f64,
        };
        let rounds = (pages / fanout.min(slots).max(1.0)).ceil();
        let p_any_fallback = 1.0 - (1.0 - fallback).powf(pages);
        let steps = config.doc_type(&config.worker.default_doc_type.clone().unwrap_or_default()).map(|d| d.steps.clone());
        let steps = steps.unwrap_or_else(|| Step::ALL.to_vec());
        let mut wall = 0.0;
        for s in steps {
            wall += match s {
                Step::Classify => rounds * cal.clip.mean_latency() + p_any_fallback * cal.vlm_classify.mean_latency(),
                Step::Metadata => cal.detector.mean_latency(),
                Step::Ocr => pages * cal.ocr.mean_latency(),
                Step::Stitch => 0.0,
                Step::Parse => {
                    let words = pages * (cal.words_per_page.0 + cal.words_per_page.1) as f64 / 2.0;
                    cal.parse.mean_latency() * (words / 960.0).sqrt()
                }
            };
        }
        Saturation { gpu_seconds_per_doc, ceiling, wall_per_doc: wall, c_sat: ceiling * wall }
    }
}

// ---------------------------------------------------------------------------
// Per-run metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub level: usize,
    pub seed: u64,
    pub n_docs: usize,
    pub completed: usize,
    pub failed: usize,
    /// Docs per model second: n / (last completion − first lease).
    pub throughput: f64,
    pub makespan: f64,
    /// Per-document processing latency: first lease to completion.
    pub latencies: Vec<f64>,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    /// Mean share of document wall time spent in each step.
    pub step_shares: BTreeMap<Step, f64>,
    pub overhead_share: f64,
    pub peak_queue_depth: usize,
    pub gpu_util: f64,
    pub api_util: f64,
    pub gpu_wait_mean: f64,
    pub api_wait_mean: f64,
    pub gpu_blocked: f64,
    pub api_blocked: f64,
    pub worker_occupancy: f64,
    pub retries: u64,
    pub redeliveries: u64,
    pub duplicate_completions: u64,
    pub ownership_violations: u64,
    pub cost_per_doc: f64,
    pub cost_by_step: BTreeMap<Step, f64>,
}

fn step_of_op(op: &str) -> Option<Step> {
    Op::ALL.into_iter().find(|o| o.as_str() == op).map(Op::step)
}

#[derive(Default)]
struct DocTrace {
    start: Option<Timestamp>,
    end: Option<Timestamp>,
    steps: BTreeMap<Step, f64>,
    /// (queued, started, finished, class)
    calls: Vec<(f64, f64, f64, CapacityClass)>,
}

/// Time during `[start, end]` that the document had a waiting request of
/// each class and no executing request.
fn blocked_time(calls: &[(f64, f64, f64, CapacityClass)]) -> (f64, f64) {
    // +1/-1 edges: (time, kind) where kind 0 = exec, 1 = gpu wait, 2 = api wait
    let mut edges: Vec<(f64, usize, i32)> = Vec::with_capacity(calls.len() * 4);
    for &(q, s, f, class) in calls {
        let w = if class == CapacityClass::Gpu { 1 } else { 2 };
        if s > q {
            edges.push((q, w, 1));
            edges.push((s, w, -1));
        }
        if f > s {
            edges.push((s, 0, 1));
            edges.push((f, 0, -1));
        }
    }
    edges.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut counts = [0i32; 3];
    let (mut gpu, mut api) = (0.0, 0.0);
    let mut prev = edges.first().map_or(0.0, |e| e.0);
    for (t, k, d) in edges {
        let dt = t - prev;
        if dt > 0.0 && counts[0] == 0 {
            if counts[1] > 0 {
                gpu += dt;
            }
            if counts[2] > 0 {
                api += dt;
            }
        }
        counts[k] += d;
        prev = t;
    }
    (gpu, api)
}

fn mean(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (s, n) = xs.into_iter().fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

fn overlap(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.1.min(b.1) - a.0.max(b.0)).max(0.0)
}

struct RunContext<'a> {
    level: usize,
    seed: u64,
    n_docs: usize,
    ids: &'a [DocumentId],
    events: Vec<Event>,
    peak_queue_depth: usize,
}

fn compute_metrics(stack: &Stack, rc: RunContext<'_>) -> RunMetrics {
    let mut traces: BTreeMap<DocumentId, DocTrace> = BTreeMap::new();
    let (mut retries, mut duplicate_completions) = (0u64, 0u64);
    let (mut gpu_waits, mut api_waits) = (Vec::new(), Vec::new());
    for e in &rc.events {
        let Some(doc) = &e.document_id else { continue };
        let t = traces.entry(doc.clone()).or_default();
        match &e.kind {
            EventKind::LeaseAcquired { .. } => {
                t.start.get_or_insert(e.at);
            }
            EventKind::Completed { duplicate: false } => t.end = Some(e.at),
            EventKind::Completed { duplicate: true } => duplicate_completions += 1,
            EventKind::StepFinished { step, started_at, finished_at, .. } => {
                *t.steps.entry(*step).or_insert(0.0) += finished_at.saturating_since(*started_at).as_secs_f64();
            }
            EventKind::StepRetry { .. } => retries += 1,
            EventKind::InferenceCall { class, queued_at, started_at, finished_at, .. } => {
                let (q, s, f) = (queued_at.as_secs_f64(), started_at.as_secs_f64(), finished_at.as_secs_f64());
                match class {
                    CapacityClass::Gpu => gpu_waits.push(s - q),
                    CapacityClass::Api => api_waits.push(s - q),
                }
                t.calls.push((q, s, f, *class));
            }
            _ => {}
        }
    }
    let (_, redeliveries) = stack.queue.delivery_stats();
    retries += redeliveries;

    let records = stack.store.tracking.snapshot();
    let completed_ids: Vec<&DocumentId> =
        rc.ids.iter().filter(|id| traces.get(*id).is_some_and(|t| t.start.is_some() && t.end.is_some())).collect();
    let failed = records.iter().filter(|r| matches!(r.status.state, DocState::Failed(_))).count();

    let spans: Vec<(f64, f64)> = completed_ids
        .iter()
        .map(|id| {
            let t = &traces[*id];
            (t.start.unwrap().as_secs_f64(), t.end.unwrap().as_secs_f64())
        })
        .collect();
    let latencies: Vec<f64> = spans.iter().map(|(a, b)| b - a).collect();
    let first = spans.iter().map(|s| s.0).fold(f64::INFINITY, f64::min);
    let mut ends: Vec<f64> = spans.iter().map(|s| s.1).collect();
    ends.sort_by(f64::total_cmp);
    let last = ends.last().copied().unwrap_or(first);
    let makespan = (last - first).max(0.0);
    let throughput = if makespan > 0.0 { spans.len() as f64 / makespan } else { 0.0 };

    // Steady window: until the level can no longer be kept full.
    let steady_end = if ends.len() > rc.level { ends[ends.len() - rc.level - 1].max(first) } else { last };
    let window = (first, if steady_end > first { steady_end } else { last });
    let (w0, w1) = (Timestamp::from_secs_f64(window.0.max(0.0)), Timestamp::from_secs_f64(window.1.max(0.0)));
    let gpu_util = stack.inference.limiter(CapacityClass::Gpu).utilization_between(w0, w1);
    let api_util = stack.inference.limiter(CapacityClass::Api).utilization_between(w0, w1);
    let busy: f64 = spans.iter().map(|s| overlap(*s, window)).sum();
    let width = window.1 - window.0;
    let worker_occupancy = if width > 0.0 { (busy / (rc.level as f64 * width)).min(1.0) } else { 0.0 };

    let mut step_shares: BTreeMap<Step, f64> = BTreeMap::new();
    let mut overhead = Vec::new();
    let (mut gpu_blocked, mut api_blocked) = (Vec::new(), Vec::new());
    for (id, (a, b)) in completed_ids.iter().zip(&spans) {
        let t = &traces[*id];
        let wall = b - a;
        if wall <= 0.0 {
            continue;
        }
        let mut used = 0.0;
        for (s, d) in &t.steps {
            *step_shares.entry(*s).or_insert(0.0) += d / wall;
            used += d;
        }
        overhead.push(1.0 - used / wall);
        let (g, p) = blocked_time(&t.calls);
        gpu_blocked.push(g / wall);
        api_blocked.push(p / wall);
    }
    let n_shares = overhead.len().max(1) as f64;
    for v in step_shares.values_mut() {
        *v /= n_shares;
    }

    let completed_recs: Vec<_> = records.iter().filter(|r| r.status.state == DocState::Completed).collect();
    let cost_per_doc = mean(completed_recs.iter().map(|r| r.total_cost()));
    let mut cost_by_step: BTreeMap<Step, f64> = BTreeMap::new();
    for r in &completed_recs {
        for c in &r.costs {
            if let Some(step) = step_of_op(&c.op) {
                *cost_by_step.entry(step).or_insert(0.0) += c.unit_cost;
            }
        }
    }
    for v in cost_by_step.values_mut() {
        *v /= completed_recs.len().max(1) as f64;
    }

    RunMetrics {
        level: rc.level,
        seed: rc.seed,
        n_docs: rc.n_docs,
        completed: completed_ids.len(),
        failed,
        throughput,
        makespan,
        p50: p_quantile(&latencies, 0.50).unwrap_or(0.0),
        p95: p_quantile(&latencies, 0.95).unwrap_or(0.0),
        p99: p_quantile(&latencies, 0.99).unwrap_or(0.0),
        latencies,
        step_shares,
        overhead_share: mean(overhead),
        peak_queue_depth: rc.peak_queue_depth,
        gpu_util,
        api_util,
        gpu_wait_mean: mean(gpu_waits),
        api_wait_mean: mean(api_waits),
        gpu_blocked: mean(gpu_blocked),
        api_blocked: mean(api_blocked),
        worker_occupancy,
        retries,
        redeliveries,
        duplicate_completions,
        ownership_violations: stack.monitor.violations(),
        cost_per_doc,
        cost_by_step,
    }
}

/// Runs one (level, seed) cell to corpus completion on the current runtime.
pub async fn run_level(plan: &ExperimentPlan, level: usize, seed: u64) -> Result<RunMetrics, ExperimentError> {
    let tmp;
    let root = match &plan.work_dir {
        Some(d) => {
            let p = d.join(format!("level-{level}-seed-{seed}"));
            if p.exists() {
                std::fs::remove_dir_all(&p)?;
            }
            std::fs::create_dir_all(&p)?;
            p
        }
        None => {
            tmp = tempfile::tempdir()?;
            tmp.path().to_path_buf()
        }
    };
    let mut config = plan.config.clone();
    config.profiler.seed = seed;
    let (pods, tasks) = level_layout(level, plan.config.worker.tasks_per_pod);
    config.worker.pods = pods;
    config.worker.tasks_per_pod = tasks;
    let event_file = plan.keep_event_logs.then(|| root.join("events.jsonl"));
    let stack = Stack::open_with_events(&root.join("store"), config.clone(), plan.calibration.clone(), event_file)?;
    let labels = if plan.labels.0.is_empty() { LabelDistribution::uniform(&config.labels()) } else { plan.labels.clone() };
    let spec = CorpusSpec { n_docs: plan.n_docs, pages: plan.pages.clone(), labels, seed };
    let corpus = generate_corpus(&spec, &config, &plan.calibration)?;

    let peak = Arc::new(AtomicUsize::new(0));
    let done = Arc::new(AtomicBool::new(false));
    let sampler = {
        let (queue, clock, peak, done) = (stack.queue.clone(), stack.clock.clone(), peak.clone(), done.clone());
        tokio::spawn(async move {
            while !done.load(Ordering::Relaxed) {
                peak.fetch_max(queue.depth().visible, Ordering::Relaxed);
                clock.sleep(secs(0.5)).await;
            }
        })
    };
    stack.start_sweeper();
    stack.spawn_pods(pods, tasks);
    let arrivals = run_ingestion(&stack.gateway, &plan.arrival, &corpus).await;
    peak.fetch_max(stack.queue.depth().visible, Ordering::Relaxed);
    let mut ids = Vec::with_capacity(arrivals.len());
    for a in arrivals {
        a.result?;
        ids.push(a.document_id);
    }
    let budget = secs(3600.0 + plan.n_docs as f64 * 120.0 / level.max(1) as f64);
    let finished = stack.wait_until_terminal(&ids, budget).await;
    stack.wait_queue_drained(secs(60.0)).await;
    done.store(true, Ordering::Relaxed);
    let _ = sampler.await;
    stack.shutdown().await;

    let rc = RunContext {
        level,
        seed,
        n_docs: plan.n_docs,
        ids: &ids,
        events: stack.events.snapshot(),
        peak_queue_depth: peak.load(Ordering::Relaxed),
    };
    let metrics = compute_metrics(&stack, rc);
    if !finished {
        let completed = ids.iter().filter(|id| stack.state_of(id).is_some_and(|s| s.is_terminal())).count();
        return Err(ExperimentError::Timeout { level, seed, completed, total: ids.len(), partial: Box::new(metrics) });
    }
    Ok(metrics)
}

// ---------------------------------------------------------------------------
// Level aggregation and bottleneck classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Workers,
    Inference,
    Downstream,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Workers => "workers",
            Tier::Inference => "inference",
            Tier::Downstream => "downstream",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
#[error("no tier dominates (gpu_util {gpu_util:.3}, gpu_blocked {gpu_blocked:.3}, api_blocked {api_blocked:.3}, occupancy {worker_occupancy:.3})")]
pub struct Ambiguous {
    pub gpu_util: f64,
    pub gpu_blocked: f64,
    pub api_blocked: f64,
    pub worker_occupancy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BottleneckSignals {
    pub gpu_util: f64,
    pub gpu_blocked: f64,
    pub api_blocked: f64,
    pub worker_occupancy: f64,
}

/// Rules, in order:
/// - inference: GPU slots saturated and GPU blocking dominates;
/// - downstream: API-class blocking dominates;
/// - workers: worker slots full and documents essentially never blocked;
/// - otherwise ambiguous.
pub fn classify_bottleneck(s: &BottleneckSignals) -> Result<Tier, Ambiguous> {
    if s.gpu_util >= GPU_UTIL_SATURATED && s.gpu_blocked >= BLOCKED_DOMINANT && s.gpu_blocked >= s.api_blocked {
        return Ok(Tier::Inference);
    }
    if s.api_blocked >= BLOCKED_DOMINANT && s.api_blocked > s.gpu_blocked {
        return Ok(Tier::Downstream);
    }
    if s.worker_occupancy >= WORKER_OCCUPANCY_MIN && s.gpu_blocked < BLOCKED_NEGLIGIBLE && s.api_blocked < BLOCKED_NEGLIGIBLE {
        return Ok(Tier::Workers);
    }
    Err(Ambiguous { gpu_util: s.gpu_util, gpu_blocked: s.gpu_blocked, api_blocked: s.api_blocked, worker_occupancy: s.worker_occupancy })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub seeds: Vec<u64>,
    pub throughput: f64,
    pub throughput_per_seed: Vec<f64>,
    pub p50: f64,
    pub p95: f64,
    pub p99: f64,
    pub peak_queue_depth: usize,
    pub gpu_util: f64,
    pub api_util: f64,
    pub gpu_wait_mean: f64,
    pub api_wait_mean: f64,
    pub gpu_blocked: f64,
    pub api_blocked: f64,
    pub worker_occupancy: f64,
    pub step_shares: BTreeMap<Step, f64>,
    pub retries: u64,
    pub redeliveries: u64,
    pub duplicates: u64,
    pub failed: usize,
    pub cost_per_doc: f64,
    pub cost_by_step: BTreeMap<Step, f64>,
    pub bottleneck: String,
}

impl LevelReport {
    pub fn from_runs(runs: &[RunMetrics]) -> Self {
        assert!(!runs.is_empty(), "a level needs at least one run");
        let m = |f: fn(&RunMetrics) -> f64| mean(runs.iter().map(f));
        let mut step_shares: BTreeMap<Step, f64> = BTreeMap::new();
        let mut cost_by_step: BTreeMap<Step, f64> = BTreeMap::new();
        for r in runs {
            for (s, v) in &r.step_shares {
                *step_shares.entry(*s).or_insert(0.0) += v / runs.len() as f64;
            }
            for (s, v) in &r.cost_by_step {
                *cost_by_step.entry(*s).or_insert(0.0) += v / runs.len() as f64;
            }
        }
        let signals = BottleneckSignals {
            gpu_util: m(|r| r.gpu_util),
            gpu_blocked: m(|r| r.gpu_blocked),
            api_blocked: m(|r| r.api_blocked),
            worker_occupancy: m(|r| r.worker_occupancy),
        };
        LevelReport {
            level: runs[0].level,
            seeds: runs.iter().map(|r| r.seed).collect(),
            throughput: m(|r| r.throughput),
            throughput_per_seed: runs.iter().map(|r| r.throughput).collect(),
            p50: m(|r| r.p50),
            p95: m(|r| r.p95),
            p99: m(|r| r.p99),
            peak_queue_depth: runs.iter().map(|r| r.peak_queue_depth).max().unwrap_or(0),
            gpu_util: signals.gpu_util,
            api_util: m(|r| r.api_util),
            gpu_wait_mean: m(|r| r.gpu_wait_mean),
            api_wait_mean: m(|r| r.api_wait_mean),
            gpu_blocked: signals.gpu_blocked,
            api_blocked: signals.api_blocked,
            worker_occupancy: signals.worker_occupancy,
            step_shares,
            retries: runs.iter().map(|r| r.retries).sum(),
            redeliveries: runs.iter().map(|r| r.redeliveries).sum(),
            duplicates: runs.iter().map(|r| r.duplicate_completions).sum(),
            failed: runs.iter().map(|r| r.failed).sum(),
            cost_per_doc: m(|r| r.cost_per_doc),
            cost_by_step,
            bottleneck: match classify_bottleneck(&signals) {
                Ok(t) => t.as_str().to_owned(),
                Err(_) => "ambiguous".to_owned(),
            },
        }
    }

    pub fn signals(&self) -> BottleneckSignals {
        BottleneckSignals {
            gpu_util: self.gpu_util,
            gpu_blocked: self.gpu_blocked,
            api_blocked: self.api_blocked,
            worker_occupancy: self.worker_occupancy,
        }
    }
}

/// Runs every level × seed cell sequentially, each on its own runtime.
pub fn run_plan(plan: &ExperimentPlan) -> Result<Vec<LevelReport>, ExperimentError> {
    let mut out = Vec::with_capacity(plan.levels.len());
    for &level in &plan.levels {
        let mut runs = Vec::with_capacity(plan.seeds.len());
        for &seed in &plan.seeds {
            let rt = plan.clock.runtime()?;
            runs.push(rt.block_on(run_level(plan, level, seed))?);
        }
        out.push(LevelReport::from_runs(&runs));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Single-document profile
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SingleDocProfile {
    pub seed: u64,
    pub wall: f64,
    pub step_seconds: BTreeMap<Step, f64>,
    pub shares: BTreeMap<Step, f64>,
    pub overhead_share: f64,
}

impl SingleDocProfile {
    pub fn largest_steps(&self) -> Vec<Step> {
        let mut v: Vec<_> = self.shares.iter().map(|(s, x)| (*s, *x)).collect();
        v.sort_by(|a, b| b.1.total_cmp(&a.1));
        v.into_iter().map(|(s, _)| s).collect()
    }
}

/// One 8-page document end to end at concurrency 1.
pub async fn single_doc_profile(config: &PipelineConfig, calibration: &Calibration, seed: u64) -> Result<SingleDocProfile, ExperimentError> {
    let mut plan = ExperimentPlan::new(config.clone());
    plan.calibration = calibration.clone();
    plan.n_docs = 1;
    plan.levels = vec![1];
    plan.seeds = vec![seed];
    let run = run_level(&plan, 1, seed).await?;
    let wall = run.latencies.first().copied().unwrap_or(0.0);
    let step_seconds = run.step_shares.iter().map(|(s, x)| (*s, x * wall)).collect();
    Ok(SingleDocProfile { seed, wall, step_seconds, shares: run.step_shares, overhead_share: run.overhead_share })
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

pub const CSV_COLUMNS: [&str; 11] =
    ["level", "throughput", "p50", "p95", "p99", "peak_queue_depth", "gpu_util", "retries", "duplicates", "cost_per_doc", "bottleneck"];

pub fn report_csv(reports: &[LevelReport]) -> String {
    let mut out = CSV_COLUMNS.join(",");
    out.push('\n');
    for r in reports {
        let _ = writeln!(
            out,
            "{},{:.6},{:.3},{:.3},{:.3},{},{:.4},{},{},{:.6},{}",
            r.level, r.throughput, r.p50, r.p95, r.p99, r.peak_queue_depth, r.gpu_util, r.retries, r.duplicates, r.cost_per_doc, r.bottleneck
        );
    }
    out
}

/// Writes `report.csv` and its JSON mirror `report.json` into `dir`.
pub fn emit_report(reports: &[LevelReport], dir: &Path) -> Result<(PathBuf, PathBuf), ProfilerError> {
    if reports.is_empty() {
        return Err(ProfilerError::EmptyReport);
    }
    std::fs::create_dir_all(dir)?;
    let csv = dir.join("report.csv");
    let json = dir.join("report.json");
    std::fs::write(&csv, report_csv(reports))?;
    let mut body = serde_json::to_string_pretty(reports).expect("report serializes");
    body.push('\n');
    std::fs::write(&json, body)?;
    Ok((csv, json))
}

// ---------------------------------------------------------------------------
// Classification calibration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationCheck {
    pub name: String,
    pub value: f64,
    pub lo: f64,
    pub hi: f64,
    pub pass: bool,
}

impl CalibrationCheck {
    fn band(name: &str, value: f64, lo: f64, hi: f64) -> Self {
        CalibrationCheck { name: name.to_owned(), value, lo, hi, pass: value >= lo && value <= hi }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub pages_per_seed: usize,
    pub per_seed: Vec<ClassificationStats>,
    pub clip_accuracy: f64,
    pub vlm_accuracy: f64,
    pub hybrid_accuracy: f64,
    pub fallback_rate: f64,
    /// Realized Monte Carlo cost per page.
    pub hybrid_cost_per_page: f64,
    /// Expectation under the confidence model.
    pub hybrid_cost_expected: f64,
    pub checks: Vec<CalibrationCheck>,
}

impl CalibrationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    /// Method / accuracy / cost / latency table.
    pub fn table(&self, cal: &Calibration) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<8} {:>9} {:>11} {:>12}", "method", "accuracy", "cost/page", "latency(s)");
        let clip_lat = format!("{:.1}-{:.1}", cal.clip.latency.0, cal.clip.latency.1);
        let vlm_lat = format!("{:.1}-{:.1}", cal.vlm_classify.latency.0, cal.vlm_classify.latency.1);
        let _ = writeln!(s, "{:<8} {:>9.4} {:>11.4} {:>12}", "clip", self.clip_accuracy, cal.clip.unit_cost, clip_lat);
        let _ = writeln!(s, "{:<8} {:>9.4} {:>11.4} {:>12}", "vlm", self.vlm_accuracy, cal.vlm_classify.unit_cost, vlm_lat);
        let _ = writeln!(s, "{:<8} {:>9.4} {:>11.4} {:>12}", "hybrid", self.hybrid_accuracy, self.hybrid_cost_expected, clip_lat);
        let _ = writeln!(s, "fallback rate {:.4} over {} pages x {} seeds", self.fallback_rate, self.pages_per_seed, self.per_seed.len());
        let _ = writeln!(s, "realized hybrid cost/page {:.6}, expected {:.6}", self.hybrid_cost_per_page, self.hybrid_cost_expected);
        for c in &self.checks {
            let _ = writeln!(s, "[{}] {} = {:.5} in [{:.4}, {:.4}]", if c.pass { "PASS" } else { "FAIL" }, c.name, c.value, c.lo, c.hi);
        }
        s
    }
}

pub fn calibrate(config: &PipelineConfig, cal: &Calibration, pages_per_seed: usize, seeds: &[u64]) -> CalibrationReport {
    let labels = config.labels();
    let threshold = config.worker.clip_confidence_threshold;
    let per_seed: Vec<ClassificationStats> =
        seeds.iter().map(|&s| classification_monte_carlo(pages_per_seed, s, cal, threshold, &labels)).collect();
    let avg = |f: fn(&ClassificationStats) -> f64| mean(per_seed.iter().map(f));
    let (clip, vlm, hybrid, fallback, cost) = (
        avg(|s| s.clip_accuracy),
        avg(|s| s.vlm_accuracy),
        avg(|s| s.hybrid_accuracy),
        avg(|s| s.fallback_rate),
        avg(|s| s.hybrid_cost_per_page),
    );
    let expected = cal.expected_hybrid_cost(threshold);
    let checks = vec![
        CalibrationCheck::band("clip_accuracy", clip, 0.91, 0.93),
        CalibrationCheck::band("vlm_accuracy", vlm, 0.97, 0.99),
        CalibrationCheck::band("hybrid_accuracy", hybrid, 0.95, 0.97),
        CalibrationCheck::band("fallback_rate", fallback, 0.03, 0.05),
        CalibrationCheck::band("hybrid_cost_expected", expected, 0.0004, 0.001),
    ];
    CalibrationReport {
        pages_per_seed,
        per_seed,
        clip_accuracy: clip,
        vlm_accuracy: vlm,
        hybrid_accuracy: hybrid,
        fallback_rate: fallback,
        hybrid_cost_per_page: cost,
        hybrid_cost_expected: expected,
        checks,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank_examples() {
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(p_quantile(&s, 0.95).unwrap(), 95.0);
        assert_eq!(p_quantile(&[7.0], 0.3).unwrap(), 7.0);
        assert_eq!(p_quantile(&[5.0, 1.0, 3.0], 0.5).unwrap(), 3.0);
        assert!(matches!(p_quantile(&[], 0.5), Err(ProfilerError::EmptySamples)));
        assert!(matches!(p_quantile(&[1.0], 1.0), Err(ProfilerError::InvalidQuantile(_))));
    }

    proptest::proptest! {
        #[test]
        fn quantile_matches_full_sort(mut xs in proptest::collection::vec(0.0f64..1e6, 1..200), q in 0.001f64..0.999) {
            let got = p_quantile(&xs, q).unwrap();
            xs.sort_by(f64::total_cmp);
            // brute force: smallest value with at least q·n samples at or below it
            let n = xs.len() as f64;
            let want = xs.iter().copied().find(|v| xs.iter().filter(|x| *x <= v).count() as f64 >= q * n).unwrap();
            proptest::prop_assert_eq!(got, want);
        }
    }

    #[test]
    fn blocked_time_counts_only_idle_waiting() {
        use CapacityClass::*;
        // gpu wait 0..2 with nothing running; then exec 2..3; api wait 3..4 overlapping exec 3..3.5
        let calls = [(0.0, 2.0, 3.0, Gpu), (3.0, 4.0, 5.0, Api), (3.0, 3.0, 3.5, Gpu)];
        let (g, a) = blocked_time(&calls);
        assert!((g - 2.0).abs() < 1e-12);
        assert!((a - 0.5).abs() < 1e-12);
    }

    #[test]
    fn bottleneck_rules() {
        let s = |u, g, a, o| BottleneckSignals { gpu_util: u, gpu_blocked: g, api_blocked: a, worker_occupancy: o };
        assert_eq!(classify_bottleneck(&s(0.3, 0.0, 0.0, 1.0)), Ok(Tier::Workers));
        assert_eq!(classify_bottleneck(&s(0.99, 0.4, 0.0, 1.0)), Ok(Tier::Inference));
        assert_eq!(classify_bottleneck(&s(0.5, 0.05, 0.6, 1.0)), Ok(Tier::Downstream));
        assert!(classify_bottleneck(&s(0.8, 0.07, 0.0, 1.0)).is_err());
        assert!(classify_bottleneck(&s(0.3, 0.0, 0.0, 0.5)).is_err());
    }

    #[test]
    fn layout_prefers_whole_pods() {
        assert_eq!(level_layout(25, 5), (5, 5));
        assert_eq!(level_layout(10, 5), (2, 5));
        assert_eq!(level_layout(2, 5), (1, 2));
        assert_eq!(level_layout(7, 5), (1, 7));
    }

    #[test]
    fn report_files_have_fixed_columns() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(emit_report(&[], dir.path()), Err(ProfilerError::EmptyReport)));
        let run = RunMetrics {
            level: 1,
            seed: 1,
            n_docs: 1,
            completed: 1,
            failed: 0,
            throughput: 0.1,
            makespan: 10.0,
            latencies: vec![10.0],
            p50: 10.0,
            p95: 10.0,
            p99: 10.0,
            step_shares: BTreeMap::new(),
            overhead_share: 0.0,
            peak_queue_depth: 3,
            gpu_util: 0.2,
            api_util: 0.1,
            gpu_wait_mean: 0.0,
            api_wait_mean: 0.0,
            gpu_blocked: 0.0,
            api_blocked: 0.0,
            worker_occupancy: 1.0,
            retries: 0,
            redeliveries: 0,
            duplicate_completions: 0,
            ownership_violations: 0,
            cost_per_doc: 0.03,
            cost_by_step: BTreeMap::new(),
        };
        let rows: Vec<_> = (1..=3).map(|l| LevelReport { level: l, ..LevelReport::from_runs(std::slice::from_ref(&run)) }).collect();
        let (csv, json) = emit_report(&rows, dir.path()).unwrap();
        let text = std::fs::read_to_string(csv).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert_eq!(text.lines().next().unwrap(), CSV_COLUMNS.join(","));
        let first = std::fs::read(&json).unwrap();
        emit_report(&rows, dir.path()).unwrap();
        assert_eq!(std::fs::read(&json).unwrap(), first);
    }

    #[test]
    fn saturation_point_from_calibration() {
        let config = PipelineConfig::default_config();
        let s = Saturation::analytic(&config, &Calibration::default(), 8.0);
        assert!((s.gpu_seconds_per_doc - 18.0).abs() < 1e-9);
        assert!((s.ceiling - 4.0 / 18.0).abs() < 1e-12);
        assert!(s.c_sat > 3.0 && s.c_sat < 4.5, "{s:?}");
    }

    #[test]
    fn single_doc_profile_is_ocr_dominated() {
        let rt = ClockMode::Virtual.runtime().unwrap();
        let config = PipelineConfig::default_config();
        let p = rt.block_on(single_doc_profile(&config, &Calibration::default(), 5)).unwrap();
        assert_eq!(p.largest_steps()[0], Step::Ocr);
        let total: f64 = p.shares.values().sum::<f64>() + p.overhead_share;
        assert!((total - 1.0).abs() < 1e-9);
        assert!(p.overhead_share.abs() < 0.01, "{p:?}");
    }

    #[test]
    fn every_op_is_attributed_to_its_step() {
        for op in Op::ALL {
            assert_eq!(step_of_op(op.as_str()), Some(op.step()));
        }
        assert_eq!(step_of_op("unknown"), None);
    }

    #[test]
    fn step_costs_add_up_to_document_cost() {
        let rt = ClockMode::Virtual.runtime().unwrap();
        let mut plan = ExperimentPlan::new(PipelineConfig::default_config());
        plan.n_docs = 20;
        let m = rt.block_on(run_level(&plan, 5, 3)).unwrap();
        let sum: f64 = m.cost_by_step.values().sum();
        assert!((sum - m.cost_per_doc).abs() < 1e-12, "{:?} vs {}", m.cost_by_step, m.cost_per_doc);
        assert!(m.cost_by_step[&Step::Classify] > 0.0 && m.cost_by_step[&Step::Parse] > 0.0);
    }
}
