//! Structured worker event log: one JSON record per line.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::clock::Timestamp;
use crate::domain::{DocState, DocumentId, Step};
use crate::inference::{CapacityClass, Op};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum EventKind {
    LeaseAcquired { lease_id: String, delivery_count: u32 },
    /// Leased a document that was already terminal.
    DuplicateDelivery { state: DocState },
    StepStarted { step: Step, attempt: u32 },
    StepFinished { step: Step, attempt: u32, started_at: Timestamp, finished_at: Timestamp },
    /// Output restored from a checkpoint instead of re-running the step.
    StepSkipped { step: Step },
    StepRetry { step: Step, attempt: u32, started_at: Timestamp, error: String },
    PageRetry { step: Step, page_index: u32, error: String },
    InferenceCall {
        op: Op,
        class: CapacityClass,
        page_index: Option<u32>,
        queued_at: Timestamp,
        started_at: Timestamp,
        finished_at: Timestamp,
        cost: f64,
    },
    InferenceRetry { op: Op, error: String },
    ResultUploaded { key: String },
    Completed { duplicate: bool },
    Failed { reason: String },
    Nacked { dead_lettered: bool },
    AckFailed { error: String },
    Crashed { after_step: Step },
    StaleDetected { processing_start_time: Timestamp },
    OwnershipViolation { other_holder: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub at: Timestamp,
    pub pod: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub document_id: Option<DocumentId>,
    #[serde(flatten)]
    pub kind: EventKind,
}

/// In-memory event log with an optional JSON-lines file sink.
#[derive(Default)]
pub struct EventLog {
    events: Mutex<Vec<Event>>,
    sink: Option<Mutex<BufWriter<File>>>,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_file(path: &Path) -> std::io::Result<Self> {
        Ok(EventLog { events: Mutex::new(Vec::new()), sink: Some(Mutex::new(BufWriter::new(File::create(path)?))) })
    }

    pub fn record(&self, at: Timestamp, pod: &str, document_id: Option<&DocumentId>, kind: EventKind) {
        let event = Event { at, pod: pod.to_owned(), document_id: document_id.cloned(), kind };
        if let Some(sink) = &self.sink {
            let mut w = sink.lock().unwrap_or_else(|e| e.into_inner());
            let _ = writeln!(w, "{}", serde_json::to_string(&event).expect("event serializes"));
        }
        self.events.lock().unwrap_or_else(|e| e.into_inner()).push(event);
    }

    pub fn flush(&self) {
        if let Some(sink) = &self.sink {
            let _ = sink.lock().unwrap_or_else(|e| e.into_inner()).flush();
        }
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn for_document(&self, id: &DocumentId) -> Vec<Event> {
        self.events
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .iter()
            .filter(|e| e.document_id.as_ref() == Some(id))
            .cloned()
            .collect()
    }

    pub fn count(&self, pred: impl Fn(&EventKind) -> bool) -> usize {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).iter().filter(|e| pred(&e.kind)).count()
    }

    pub fn len(&self) -> usize {
        self.events.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn events_serialize_one_per_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        let log = EventLog::with_file(&path).unwrap();
        let doc = DocumentId::new("d");
        log.record(Timestamp::ZERO, "pod-0", Some(&doc), EventKind::StepSkipped { step: Step::Ocr });
        log.record(Timestamp::from_secs_f64(1.0), "pod-0", None, EventKind::Completed { duplicate: false });
        log.flush();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<Event> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(lines, log.snapshot());
        assert!(text.lines().next().unwrap().contains("\"event\":\"step_skipped\""));
        assert_eq!(log.for_document(&doc).len(), 1);
    }
}
