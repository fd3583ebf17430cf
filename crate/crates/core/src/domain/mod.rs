//! Identifiers, the document/page model, the processing status machine and
//! pipeline configuration shared by every service.

mod config;
mod status;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;

pub use config::{
    validate_config, ConfigError, ConfidenceModelKind, DetectBackend, DocTypeConfig,
    InferenceSettings, PipelineConfig, ProfilerSettings, QueueSettings, WorkerSettings,
    DEFAULT_CLIP_THRESHOLD, DEFAULT_STALE_THRESHOLD_SECS, DEFAULT_TASKS_PER_POD,
    DEFAULT_VISIBILITY_TIMEOUT_SECS,
};
pub use status::{transition, DocState, DocumentStatus, StatusEvent, TransitionError};

/// Opaque unique document identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DocumentId(String);

impl DocumentId {
    pub fn new(id: impl Into<String>) -> Self {
        DocumentId(id.into())
    }

    pub fn generate() -> Self {
        DocumentId(format!("doc-{}", uuid::Uuid::new_v4().simple()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for DocumentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Object-store key.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlobKey(String);

impl BlobKey {
    pub fn new(key: impl Into<String>) -> Self {
        BlobKey(key.into())
    }

    pub fn page(doc: &DocumentId, page_index: u32) -> Self {
        BlobKey(format!("pages/{doc}/{page_index:04}"))
    }

    pub fn result(doc: &DocumentId) -> Self {
        BlobKey(format!("results/{doc}"))
    }

    pub fn checkpoint(doc: &DocumentId, step: Step, attempt: u32) -> Self {
        BlobKey(format!("checkpoints/{doc}/{step}/{attempt}"))
    }

    pub fn page_checkpoint(doc: &DocumentId, step: Step, page_index: u32) -> Self {
        BlobKey(format!("checkpoints/{doc}/{step}/page-{page_index:04}"))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl fmt::Display for BlobKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Reference to one page of a document.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PageRef {
    pub document_id: DocumentId,
    pub page_index: u32,
    pub blob_key: BlobKey,
}

/// A submitted multi-page unit. Pages are in submission order and their
/// indices are contiguous from zero.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Document {
    pub id: DocumentId,
    pub pages: Vec<PageRef>,
    pub doc_type: String,
    pub submitted_at: Timestamp,
}

impl Document {
    /// Builds a document whose pages live at the canonical page keys.
    pub fn with_pages(id: DocumentId, doc_type: impl Into<String>, n_pages: u32, submitted_at: Timestamp) -> Self {
        let pages = (0..n_pages)
            .map(|i| PageRef { document_id: id.clone(), page_index: i, blob_key: BlobKey::page(&id, i) })
            .collect();
        Document { id, pages, doc_type: doc_type.into(), submitted_at }
    }

    pub fn page_count(&self) -> usize {
        self.pages.len()
    }
}

/// A pipeline step. Declaration order is the canonical pipeline order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Step {
    Classify,
    Metadata,
    Ocr,
    Stitch,
    Parse,
}

impl Step {
    pub const ALL: [Step; 5] = [Step::Classify, Step::Metadata, Step::Ocr, Step::Stitch, Step::Parse];

    pub fn as_str(self) -> &'static str {
        match self {
            Step::Classify => "classify",
            Step::Metadata => "metadata",
            Step::Ocr => "ocr",
            Step::Stitch => "stitch",
            Step::Parse => "parse",
        }
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Step {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Step::ALL
            .into_iter()
            .find(|step| step.as_str() == s)
            .ok_or_else(|| format!("unknown step `{s}`"))
    }
}

/// One billable model call.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CostEntry {
    pub document_id: DocumentId,
    pub op: String,
    /// Dollars.
    pub unit_cost: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_tokens: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_tokens: Option<u64>,
}

impl CostEntry {
    pub fn flat(document_id: &DocumentId, op: &str, unit_cost: f64) -> Self {
        CostEntry { document_id: document_id.clone(), op: op.to_owned(), unit_cost, input_tokens: None, output_tokens: None }
    }
}
