use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::clock::{Clock, Timestamp};
use crate::domain::{transition, BlobKey, CostEntry, DocState, DocumentId, DocumentStatus, StatusEvent, Step};

use super::blob::BlobStore;
use super::StoreError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepTiming {
    pub step: Step,
    pub attempt: u32,
    pub started_at: Timestamp,
    pub finished_at: Option<Timestamp>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepCheckpoint {
    pub document_id: DocumentId,
    pub step: Step,
    pub payload_key: BlobKey,
    pub attempt: u32,
    pub created_at: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingRecord {
    pub document_id: DocumentId,
    pub doc_type: String,
    pub steps: Vec<Step>,
    pub page_count: u32,
    pub status: DocumentStatus,
    pub timings: Vec<StepTiming>,
    pub costs: Vec<CostEntry>,
    pub checkpoints: BTreeMap<Step, StepCheckpoint>,
    /// Idempotency keys of applied `(event, attempt)` pairs.
    pub applied: BTreeSet<String>,
    pub created_at: Timestamp,
    pub updated_at: Timestamp,
}

impl TrackingRecord {
    pub fn total_cost(&self) -> f64 {
        self.costs.iter().map(|c| c.unit_cost).sum()
    }
}

/// Minimal projection used by stale detection.
#[derive(Debug, Clone, PartialEq)]
pub struct StatusView {
    pub document_id: DocumentId,
    pub state: DocState,
    pub processing_start_time: Option<Timestamp>,
    pub delivery_count: u32,
}

/// Durable document records: an in-memory index backed by an append-only
/// JSON-lines log. Every mutation appends the full record; opening the
/// store replays the log and rewrites it with one line per document.
pub struct TrackingStore {
    log_path: PathBuf,
    clock: Arc<dyn Clock>,
    blobs: Arc<BlobStore>,
    index: Mutex<HashMap<DocumentId, Arc<Mutex<TrackingRecord>>>>,
    log: Mutex<File>,
}

impl TrackingStore {
    pub fn open(dir: impl AsRef<Path>, blobs: Arc<BlobStore>, clock: Arc<dyn Clock>) -> Result<Self, StoreError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let log_path = dir.join("records.log");
        let mut latest: BTreeMap<DocumentId, TrackingRecord> = BTreeMap::new();
        if log_path.exists() {
            for line in BufReader::new(File::open(&log_path)?).lines() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                // A torn final line from a crash mid-append is skipped.
                if let Ok(rec) = serde_json::from_str::<TrackingRecord>(&line) {
                    latest.insert(rec.document_id.clone(), rec);
                }
            }
            let tmp = dir.join("records.log.compact");
            {
                let mut f = File::create(&tmp)?;
                for rec in latest.values() {
                    writeln!(f, "{}", serde_json::to_string(rec)?)?;
                }
            }
            fs::rename(&tmp, &log_path)?;
        }
        let log = OpenOptions::new().create(true).append(true).open(&log_path)?;
        let index = latest.into_iter().map(|(k, v)| (k, Arc::new(Mutex::new(v)))).collect();
        Ok(TrackingStore { log_path, clock, blobs, index: Mutex::new(index), log: Mutex::new(log) })
    }

    pub fn log_path(&self) -> &Path {
        &self.log_path
    }

    fn entry(&self, id: &DocumentId) -> Result<Arc<Mutex<TrackingRecord>>, StoreError> {
        self.index
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| StoreError::NotFound(id.to_string()))
    }

    fn persist(&self, rec: &TrackingRecord) -> Result<(), StoreError> {
        let line = serde_json::to_string(rec)?;
        let mut log = self.log.lock().unwrap_or_else(|e| e.into_inner());
        writeln!(log, "{line}")?;
        Ok(())
    }

    /// Runs `f` on the record under its per-document lock, persisting the
    /// result if `f` reports a change.
    fn mutate<T>(
        &self,
        id: &DocumentId,
        f: impl FnOnce(&mut TrackingRecord, Timestamp) -> Result<(bool, T), StoreError>,
    ) -> Result<T, StoreError> {
        let entry = self.entry(id)?;
        let mut rec = entry.lock().unwrap_or_else(|e| e.into_inner());
        let now = self.clock.now();
        let mut draft = rec.clone();
        let (changed, out) = f(&mut draft, now)?;
        if changed {
            draft.updated_at = draft.updated_at.max(now);
            self.persist(&draft)?;
            *rec = draft;
        }
        Ok(out)
    }

    pub fn create_record(&self, id: &DocumentId, doc_type: &str, steps: &[Step], page_count: u32) -> Result<TrackingRecord, StoreError> {
        let now = self.clock.now();
        let rec = TrackingRecord {
            document_id: id.clone(),
            doc_type: doc_type.to_owned(),
            steps: steps.to_vec(),
            page_count,
            status: DocumentStatus::submitted(),
            timings: Vec::new(),
            costs: Vec::new(),
            checkpoints: BTreeMap::new(),
            applied: BTreeSet::new(),
            created_at: now,
            updated_at: now,
        };
        let mut index = self.index.lock().unwrap_or_else(|e| e.into_inner());
        if index.contains_key(id) {
            return Err(StoreError::AlreadyExists(id.to_string()));
        }
        self.persist(&rec)?;
        index.insert(id.clone(), Arc::new(Mutex::new(rec.clone())));
        Ok(rec)
    }

    pub fn get(&self, id: &DocumentId) -> Result<TrackingRecord, StoreError> {
        let entry = self.entry(id)?;
        let rec = entry.lock().unwrap_or_else(|e| e.into_inner()).clone();
        Ok(rec)
    }

    /// Current state without cloning the record.
    pub fn state(&self, id: &DocumentId) -> Option<DocState> {
        let entry = self.entry(id).ok()?;
        let state = entry.lock().unwrap_or_else(|e| e.into_inner()).status.state.clone();
        Some(state)
    }

    pub fn contains(&self, id: &DocumentId) -> bool {
        self.index.lock().unwrap_or_else(|e| e.into_inner()).contains_key(id)
    }

    /// Applies `event` through the status machine. A repeated
    /// `(event, attempt)` pair returns the current record unchanged.
    pub fn update_status(&self, id: &DocumentId, event: &StatusEvent, attempt: u32) -> Result<TrackingRecord, StoreError> {
        let key = format!("{}#{attempt}", event.key());
        self.mutate(id, |rec, now| {
            if rec.applied.contains(&key) {
                return Ok((false, rec.clone()));
            }
            let mut next = transition(&rec.status, event, &rec.steps)?;
            next.delivery_count = next.delivery_count.max(attempt);
            rec.status = next;
            rec.applied.insert(key);
            if let StatusEvent::StepCompleted(step) = event {
                if let Some(t) = rec.timings.iter_mut().rev().find(|t| t.step == *step && t.finished_at.is_none()) {
                    t.finished_at = Some(now.max(t.started_at));
                }
            }
            rec.updated_at = rec.updated_at.max(now);
            Ok((true, rec.clone()))
        })
    }

    pub fn record_step_started(&self, id: &DocumentId, step: Step, attempt: u32) -> Result<(), StoreError> {
        self.mutate(id, |rec, now| {
            if !rec.steps.contains(&step) {
                return Err(StoreError::UnknownStep(step));
            }
            rec.timings.push(StepTiming { step, attempt, started_at: now, finished_at: None });
            Ok((true, ()))
        })
    }

    /// Sets `processing_start_time` if unset. Returns whether it was set now.
    pub fn mark_processing_started(&self, id: &DocumentId, at: Timestamp) -> Result<bool, StoreError> {
        self.mutate(id, |rec, _| {
            if rec.status.processing_start_time.is_some() {
                return Ok((false, false));
            }
            rec.status.processing_start_time = Some(at);
            Ok((true, true))
        })
    }

    pub fn append_costs(&self, id: &DocumentId, entries: &[CostEntry]) -> Result<(), StoreError> {
        if entries.is_empty() {
            return Ok(());
        }
        self.mutate(id, |rec, _| {
            rec.costs.extend_from_slice(entries);
            Ok((true, ()))
        })
    }

    /// Persists a step output as a blob and records it as that step's
    /// checkpoint. A later attempt supersedes an earlier one.
    pub fn save_checkpoint(&self, id: &DocumentId, step: Step, payload: &[u8], attempt: u32) -> Result<StepCheckpoint, StoreError> {
        let rec = self.get(id)?;
        if !rec.steps.contains(&step) {
            return Err(StoreError::UnknownStep(step));
        }
        let payload_key = BlobKey::checkpoint(id, step, attempt);
        self.blobs.put(&payload_key, payload)?;
        self.mutate(id, |rec, now| {
            if let Some(existing) = rec.checkpoints.get(&step) {
                if existing.attempt > attempt || (existing.attempt == attempt && existing.payload_key == payload_key) {
                    return Ok((false, existing.clone()));
                }
            }
            let cp = StepCheckpoint { document_id: id.clone(), step, payload_key: payload_key.clone(), attempt, created_at: now };
            rec.checkpoints.insert(step, cp.clone());
            Ok((true, cp))
        })
    }

    /// The checkpoint of the furthest completed step in pipeline order.
    pub fn latest_checkpoint(&self, id: &DocumentId) -> Result<Option<(Step, Vec<u8>)>, StoreError> {
        let rec = self.get(id)?;
        let Some(step) = rec.steps.iter().rev().find(|s| rec.checkpoints.contains_key(s)).copied() else {
            return Ok(None);
        };
        let payload = self.blobs.get(&rec.checkpoints[&step].payload_key)?.bytes;
        Ok(Some((step, payload)))
    }

    pub fn checkpoint_payload(&self, id: &DocumentId, step: Step) -> Result<Option<Vec<u8>>, StoreError> {
        let rec = self.get(id)?;
        match rec.checkpoints.get(&step) {
            Some(cp) => Ok(Some(self.blobs.get(&cp.payload_key)?.bytes)),
            None => Ok(None),
        }
    }

    pub fn snapshot(&self) -> Vec<TrackingRecord> {
        let entries: Vec<_> = self.index.lock().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
        let mut out: Vec<TrackingRecord> = entries.iter().map(|e| e.lock().unwrap_or_else(|p| p.into_inner()).clone()).collect();
        out.sort_by(|a, b| a.document_id.cmp(&b.document_id));
        out
    }

    pub fn status_view(&self) -> Vec<StatusView> {
        let entries: Vec<_> = self.index.lock().unwrap_or_else(|e| e.into_inner()).values().cloned().collect();
        entries
            .iter()
            .map(|e| {
                let r = e.lock().unwrap_or_else(|p| p.into_inner());
                StatusView {
                    document_id: r.document_id.clone(),
                    state: r.status.state.clone(),
                    processing_start_time: r.status.processing_start_time,
                    delivery_count: r.status.delivery_count,
                }
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.index.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}
