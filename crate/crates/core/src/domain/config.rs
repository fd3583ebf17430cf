//! Pipeline configuration: the YAML file format and its validated form.
//!
//! Parsing is strict: unknown keys anywhere are errors. Every optional key
//! is filled with its default during validation, and [`PipelineConfig::to_yaml`]
//! writes the fully-populated form back out.

use std::collections::BTreeMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Step;
use crate::clock::secs;

pub const DEFAULT_CLIP_THRESHOLD: f64 = 0.7;
pub const DEFAULT_VISIBILITY_TIMEOUT_SECS: f64 = 300.0;
pub const DEFAULT_TASKS_PER_POD: usize = 5;
/// Twice the nominal P99 of an unloaded 8-page document (about 25 s).
pub const DEFAULT_STALE_THRESHOLD_SECS: f64 = 50.0;

const DEFAULT_PODS: usize = 5;
const DEFAULT_GPU_SLOTS: usize = 4;
const DEFAULT_API_CONCURRENCY: usize = 16;
const DEFAULT_MAX_DELIVERIES: u32 = 5;
const DEFAULT_STEP_RETRIES: u32 = 2;
const DEFAULT_PAGE_RETRIES: u32 = 2;
const DEFAULT_POLL_INTERVAL_SECS: f64 = 1.0;
const DEFAULT_SWEEP_INTERVAL_SECS: f64 = 10.0;
const DEFAULT_TIME_SCALE: f64 = 0.01;
const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConfigError {
    #[error("config syntax: {0}")]
    Syntax(String),
    #[error("{key}: {constraint}")]
    Invalid { key: String, constraint: String },
}

impl ConfigError {
    pub fn invalid(key: impl Into<String>, constraint: impl Into<String>) -> Self {
        ConfigError::Invalid { key: key.into(), constraint: constraint.into() }
    }

    /// The offending key, when the error is a constraint violation.
    pub fn key(&self) -> Option<&str> {
        match self {
            ConfigError::Invalid { key, .. } => Some(key),
            ConfigError::Syntax(_) => None,
        }
    }
}

/// Backend used by the auxiliary metadata step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectBackend {
    #[default]
    Detector,
    Vlm,
}

/// How clip confidences are generated by the simulator.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfidenceModelKind {
    /// Easy pages land above the threshold, hard pages below it.
    #[default]
    TwoPoint,
    /// Beta-distributed confidences per difficulty class, for threshold sweeps.
    BetaMixture,
}

// ---------------------------------------------------------------------------
// File format
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    doc_types: BTreeMap<String, RawDocType>,
    #[serde(default)]
    queue: RawQueue,
    #[serde(default)]
    inference: RawInference,
    #[serde(default)]
    worker: RawWorker,
    #[serde(default)]
    profiler: RawProfiler,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDocType {
    steps: Vec<String>,
    #[serde(default)]
    fields: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    metadata_backend: Option<DetectBackend>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawQueue {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    visibility_timeout: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_deliveries: Option<u32>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawInference {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gpu_slots: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    api_concurrency: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_wait_queue: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    malformed_output_probability: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    confidence_model: Option<ConfidenceModelKind>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawWorker {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pods: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    tasks_per_pod: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    clip_confidence_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stale_threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    step_retries: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    page_retries: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ocr_page_checkpoints: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    default_doc_type: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    poll_interval: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    sweep_interval: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    classify_fanout: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawProfiler {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    time_scale: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

// ---------------------------------------------------------------------------
// Validated form
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct DocTypeConfig {
    pub steps: Vec<Step>,
    /// Static field schema used by the parse step.
    pub fields: Vec<String>,
    pub metadata_backend: DetectBackend,
}

impl DocTypeConfig {
    pub fn has_step(&self, step: Step) -> bool {
        self.steps.contains(&step)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueSettings {
    pub visibility_timeout: f64,
    pub max_deliveries: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceSettings {
    pub gpu_slots: usize,
    pub api_concurrency: usize,
    /// Bounded wait queue per limiter; `None` is unbounded.
    pub max_wait_queue: Option<usize>,
    pub malformed_output_probability: f64,
    pub confidence_model: ConfidenceModelKind,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorkerSettings {
    pub pods: usize,
    pub tasks_per_pod: usize,
    pub clip_confidence_threshold: f64,
    pub stale_threshold: f64,
    pub step_retries: u32,
    pub page_retries: u32,
    pub ocr_page_checkpoints: bool,
    pub default_doc_type: Option<String>,
    pub poll_interval: f64,
    pub sweep_interval: f64,
    /// Max concurrent page classifications per document; 0 means all pages.
    pub classify_fanout: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfilerSettings {
    pub time_scale: f64,
    pub seed: u64,
}

/// Fully validated pipeline configuration. Durations are model seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub doc_types: BTreeMap<String, DocTypeConfig>,
    pub queue: QueueSettings,
    pub inference: InferenceSettings,
    pub worker: WorkerSettings,
    pub profiler: ProfilerSettings,
}

/// Parses and validates a YAML configuration document.
pub fn validate_config(raw: &str) -> Result<PipelineConfig, ConfigError> {
    let raw: RawConfig = serde_yaml::from_str(raw).map_err(|e| ConfigError::Syntax(e.to_string()))?;
    PipelineConfig::from_raw(raw)
}

impl PipelineConfig {
    fn from_raw(raw: RawConfig) -> Result<Self, ConfigError> {
        if raw.doc_types.is_empty() {
            return Err(ConfigError::invalid("doc_types", "at least one document type is required"));
        }
        let mut doc_types = BTreeMap::new();
        for (name, dt) in raw.doc_types {
            let key = format!("doc_types.{name}");
            if name.trim().is_empty() {
                return Err(ConfigError::invalid("doc_types", "document type names must be non-empty"));
            }
            let steps = dt
                .steps
                .iter()
                .map(|s| s.parse::<Step>().map_err(|e| ConfigError::invalid(format!("{key}.steps"), e)))
                .collect::<Result<Vec<_>, _>>()?;
            check_step_order(&steps).map_err(|c| ConfigError::invalid(format!("{key}.steps"), c))?;
            if steps.contains(&Step::Parse) && dt.fields.is_empty() {
                return Err(ConfigError::invalid(format!("{key}.fields"), "a parse step needs a non-empty field schema"));
            }
            let mut seen = std::collections::BTreeSet::new();
            for f in &dt.fields {
                if f.is_empty() || f.contains(char::is_whitespace) || f.contains(':') {
                    return Err(ConfigError::invalid(format!("{key}.fields"), format!("invalid field name `{f}`")));
                }
                if !seen.insert(f) {
                    return Err(ConfigError::invalid(format!("{key}.fields"), format!("duplicate field `{f}`")));
                }
            }
            doc_types.insert(
                name,
                DocTypeConfig { steps, fields: dt.fields, metadata_backend: dt.metadata_backend.unwrap_or_default() },
            );
        }

        let queue = QueueSettings {
            visibility_timeout: raw.queue.visibility_timeout.unwrap_or(DEFAULT_VISIBILITY_TIMEOUT_SECS),
            max_deliveries: raw.queue.max_deliveries.unwrap_or(DEFAULT_MAX_DELIVERIES),
        };
        positive("queue.visibility_timeout", queue.visibility_timeout)?;
        if queue.max_deliveries == 0 {
            return Err(ConfigError::invalid("queue.max_deliveries", "must be at least 1"));
        }

        let inference = InferenceSettings {
            gpu_slots: raw.inference.gpu_slots.unwrap_or(DEFAULT_GPU_SLOTS),
            api_concurrency: raw.inference.api_concurrency.unwrap_or(DEFAULT_API_CONCURRENCY),
            max_wait_queue: raw.inference.max_wait_queue,
            malformed_output_probability: raw.inference.malformed_output_probability.unwrap_or(0.0),
            confidence_model: raw.inference.confidence_model.unwrap_or_default(),
        };
        at_least_one("inference.gpu_slots", inference.gpu_slots)?;
        at_least_one("inference.api_concurrency", inference.api_concurrency)?;
        let p = inference.malformed_output_probability;
        if !(0.0..=1.0).contains(&p) {
            return Err(ConfigError::invalid("inference.malformed_output_probability", "must lie in [0, 1]"));
        }

        let worker = WorkerSettings {
            pods: raw.worker.pods.unwrap_or(DEFAULT_PODS),
            tasks_per_pod: raw.worker.tasks_per_pod.unwrap_or(DEFAULT_TASKS_PER_POD),
            clip_confidence_threshold: raw.worker.clip_confidence_threshold.unwrap_or(DEFAULT_CLIP_THRESHOLD),
            stale_threshold: raw.worker.stale_threshold.unwrap_or(DEFAULT_STALE_THRESHOLD_SECS),
            step_retries: raw.worker.step_retries.unwrap_or(DEFAULT_STEP_RETRIES),
            page_retries: raw.worker.page_retries.unwrap_or(DEFAULT_PAGE_RETRIES),
            ocr_page_checkpoints: raw.worker.ocr_page_checkpoints.unwrap_or(false),
            default_doc_type: raw.worker.default_doc_type,
            poll_interval: raw.worker.poll_interval.unwrap_or(DEFAULT_POLL_INTERVAL_SECS),
            sweep_interval: raw.worker.sweep_interval.unwrap_or(DEFAULT_SWEEP_INTERVAL_SECS),
            classify_fanout: raw.worker.classify_fanout.unwrap_or(0),
        };
        at_least_one("worker.pods", worker.pods)?;
        at_least_one("worker.tasks_per_pod", worker.tasks_per_pod)?;
        let t = worker.clip_confidence_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(ConfigError::invalid("worker.clip_confidence_threshold", "must lie strictly between 0 and 1"));
        }
        positive("worker.stale_threshold", worker.stale_threshold)?;
        positive("worker.poll_interval", worker.poll_interval)?;
        positive("worker.sweep_interval", worker.sweep_interval)?;
        if let Some(d) = &worker.default_doc_type {
            if !doc_types.contains_key(d) {
                return Err(ConfigError::invalid("worker.default_doc_type", format!("`{d}` is not a configured doc type")));
            }
        }

        let profiler = ProfilerSettings {
            time_scale: raw.profiler.time_scale.unwrap_or(DEFAULT_TIME_SCALE),
            seed: raw.profiler.seed.unwrap_or(DEFAULT_SEED),
        };
        positive("profiler.time_scale", profiler.time_scale)?;

        Ok(PipelineConfig { doc_types, queue, inference, worker, profiler })
    }

    fn to_raw(&self) -> RawConfig {
        RawConfig {
            doc_types: self
                .doc_types
                .iter()
                .map(|(name, dt)| {
                    (
                        name.clone(),
                        RawDocType {
                            steps: dt.steps.iter().map(|s| s.to_string()).collect(),
                            fields: dt.fields.clone(),
                            metadata_backend: Some(dt.metadata_backend),
                        },
                    )
                })
                .collect(),
            queue: RawQueue {
                visibility_timeout: Some(self.queue.visibility_timeout),
                max_deliveries: Some(self.queue.max_deliveries),
            },
            inference: RawInference {
                gpu_slots: Some(self.inference.gpu_slots),
                api_concurrency: Some(self.inference.api_concurrency),
                max_wait_queue: self.inference.max_wait_queue,
                malformed_output_probability: Some(self.inference.malformed_output_probability),
                confidence_model: Some(self.inference.confidence_model),
            },
            worker: RawWorker {
                pods: Some(self.worker.pods),
                tasks_per_pod: Some(self.worker.tasks_per_pod),
                clip_confidence_threshold: Some(self.worker.clip_confidence_threshold),
                stale_threshold: Some(self.worker.stale_threshold),
                step_retries: Some(self.worker.step_retries),
                page_retries: Some(self.worker.page_retries),
                ocr_page_checkpoints: Some(self.worker.ocr_page_checkpoints),
                default_doc_type: self.worker.default_doc_type.clone(),
                poll_interval: Some(self.worker.poll_interval),
                sweep_interval: Some(self.worker.sweep_interval),
                classify_fanout: Some(self.worker.classify_fanout),
            },
            profiler: RawProfiler { time_scale: Some(self.profiler.time_scale), seed: Some(self.profiler.seed) },
        }
    }

    /// Serializes the fully-populated configuration in the file format.
    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(&self.to_raw()).expect("config serializes")
    }

    /// The built-in configuration: three form types, each running the
    /// classify → ocr → stitch → parse pipeline.
    pub fn default_config() -> Self {
        validate_config(DEFAULT_CONFIG_YAML).expect("built-in config is valid")
    }

    pub fn doc_type(&self, name: &str) -> Option<&DocTypeConfig> {
        self.doc_types.get(name)
    }

    pub fn labels(&self) -> Vec<String> {
        self.doc_types.keys().cloned().collect()
    }

    pub fn visibility_timeout(&self) -> Duration {
        secs(self.queue.visibility_timeout)
    }

    pub fn stale_threshold(&self) -> Duration {
        secs(self.worker.stale_threshold)
    }
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::default_config()
    }
}

/// The configuration shipped as `config/default.yaml`.
pub const DEFAULT_CONFIG_YAML: &str = include_str!("../../config/default.yaml");

fn positive(key: &str, v: f64) -> Result<(), ConfigError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(ConfigError::invalid(key, "must be a positive number"))
    }
}

fn at_least_one(key: &str, v: usize) -> Result<(), ConfigError> {
    if v >= 1 {
        Ok(())
    } else {
        Err(ConfigError::invalid(key, "must be at least 1"))
    }
}

fn check_step_order(steps: &[Step]) -> Result<(), String> {
    if steps.is_empty() {
        return Err("step list must be non-empty".into());
    }
    for (i, s) in steps.iter().enumerate() {
        if steps[..i].contains(s) {
            return Err(format!("step `{s}` appears more than once"));
        }
    }
    let pos = |s: Step| steps.iter().position(|x| *x == s);
    if pos(Step::Parse).is_some_and(|p| p + 1 != steps.len()) {
        return Err("parse must be the last step".into());
    }
    if let Some(stitch) = pos(Step::Stitch) {
        match pos(Step::Ocr) {
            Some(ocr) if ocr < stitch => {}
            _ => return Err("stitch requires an earlier ocr step".into()),
        }
    }
    if let Some(parse) = pos(Step::Parse) {
        match pos(Step::Stitch) {
            Some(stitch) if stitch < parse => {}
            _ => return Err("parse requires an earlier stitch step".into()),
        }
    }
    Ok(())
}
