//! In-process wiring of gateway, worker pods, inference service, queues and
//! stores over one model clock.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;
use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::clock::{secs, Clock, ScaledClock};
use crate::domain::{DocState, DocumentId, PipelineConfig};
use crate::gateway::{Gateway, GatewayError, Submission, SubmissionSource};
use crate::inference::{InferenceClient, InferenceService};
use crate::mqueue::{Queue, StatusNotification};
use crate::store::{Store, StoreError};
use crate::worker::{spawn_sweeper, CrashInjector, EventLog, OwnershipMonitor, PodHandle, WorkerContext, WorkerPod};
use crate::worldgen::{Calibration, SyntheticDocument};

const WAIT_POLL: f64 = 0.5;

#[derive(Debug, Error)]
pub enum StackError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub struct Stack {
    pub config: Arc<PipelineConfig>,
    pub clock: Arc<ScaledClock>,
    pub store: Arc<Store>,
    pub queue: Arc<Queue<DocumentId>>,
    pub status_queue: Arc<Queue<StatusNotification>>,
    pub inference: Arc<InferenceService>,
    pub gateway: Arc<Gateway>,
    pub events: Arc<EventLog>,
    pub monitor: Arc<OwnershipMonitor>,
    pub crash: Arc<CrashInjector>,
    client: Arc<dyn InferenceClient>,
    pods: Mutex<Vec<PodHandle>>,
    stop: watch::Sender<bool>,
    background: Mutex<Vec<JoinHandle<()>>>,
}

impl Stack {
    /// Opens stores under `root` and builds every component. Must be called
    /// inside a tokio runtime; the model clock starts now.
    pub fn open(root: &Path, config: PipelineConfig, calibration: Calibration) -> Result<Self, StackError> {
        Self::open_with_events(root, config, calibration, None)
    }

    pub fn open_with_events(
        root: &Path,
        config: PipelineConfig,
        calibration: Calibration,
        event_file: Option<PathBuf>,
    ) -> Result<Self, StackError> {
        let config = Arc::new(config);
        let clock = Arc::new(ScaledClock::new(config.profiler.time_scale));
        let store = Arc::new(Store::open(root, clock.clone())?);
        let queue = Arc::new(Queue::with_max_deliveries("worker", clock.clone(), config.queue.max_deliveries));
        let status_queue = Arc::new(Queue::new("status", clock.clone()));
        let inference = Arc::new(InferenceService::new(&config, calibration, store.blobs.clone(), clock.clone()));
        let gateway = Arc::new(Gateway::new(config.clone(), store.clone(), queue.clone(), clock.clone()));
        let events = Arc::new(match event_file {
            Some(p) => EventLog::with_file(&p)?,
            None => EventLog::new(),
        });
        let (stop, _) = watch::channel(false);
        let consumer = gateway.spawn_status_consumer(status_queue.clone());
        Ok(Stack {
            config,
            clock,
            store,
            queue,
            status_queue,
            client: inference.clone(),
            inference,
            gateway,
            events,
            monitor: Arc::new(OwnershipMonitor::new()),
            crash: Arc::new(CrashInjector::new()),
            pods: Mutex::new(Vec::new()),
            stop,
            background: Mutex::new(vec![consumer]),
        })
    }

    /// Routes worker inference calls through `client` (e.g. over HTTP).
    pub fn set_inference_client(&mut self, client: Arc<dyn InferenceClient>) {
        self.client = client;
    }

    pub fn worker_context(&self) -> WorkerContext {
        WorkerContext {
            config: self.config.clone(),
            store: self.store.clone(),
            queue: self.queue.clone(),
            status_queue: self.status_queue.clone(),
            inference: self.client.clone(),
            clock: self.clock.clone(),
            events: self.events.clone(),
            monitor: self.monitor.clone(),
            crash: self.crash.clone(),
        }
    }

    /// A pod owned by the caller (for kill/restart experiments).
    pub fn spawn_pod(&self, pod_id: &str, tasks: usize) -> PodHandle {
        WorkerPod::new(pod_id, self.worker_context()).with_tasks(tasks).spawn()
    }

    /// Starts `pods` pods of `tasks` each, owned by the stack.
    pub fn spawn_pods(&self, pods: usize, tasks: usize) {
        let mut held = self.pods.lock().unwrap_or_else(|e| e.into_inner());
        let base = held.len();
        for i in 0..pods {
            held.push(self.spawn_pod(&format!("pod-{}", base + i), tasks));
        }
    }

    pub fn start_sweeper(&self) {
        let h = spawn_sweeper(self.worker_context(), self.stop.subscribe());
        self.background.lock().unwrap_or_else(|e| e.into_inner()).push(h);
    }

    pub fn submit_corpus(&self, corpus: &[SyntheticDocument]) -> Result<Vec<DocumentId>, GatewayError> {
        corpus
            .iter()
            .map(|d| self.gateway.submit(Submission::from_synthetic(d, SubmissionSource::Api)).map(|r| r.document_id))
            .collect()
    }

    pub fn state_of(&self, id: &DocumentId) -> Option<DocState> {
        self.store.tracking.state(id)
    }

    /// Waits (model time) until every id is terminal. Returns false on timeout.
    pub async fn wait_until_terminal(&self, ids: &[DocumentId], timeout: Duration) -> bool {
        let deadline = self.clock.now() + timeout;
        let mut pending: Vec<&DocumentId> = ids.iter().collect();
        loop {
            pending.retain(|id| !self.state_of(id).is_some_and(|s| s.is_terminal()));
            if pending.is_empty() {
                return true;
            }
            if self.clock.now() >= deadline {
                return false;
            }
            self.clock.sleep(secs(WAIT_POLL)).await;
        }
    }

    /// Waits until the worker queue has no visible or leased messages.
    pub async fn wait_queue_drained(&self, timeout: Duration) -> bool {
        let deadline = self.clock.now() + timeout;
        loop {
            let d = self.queue.depth();
            if d.visible == 0 && d.in_flight == 0 {
                return true;
            }
            if self.clock.now() >= deadline {
                return false;
            }
            self.clock.sleep(secs(WAIT_POLL)).await;
        }
    }

    /// Gracefully stops pods and background tasks.
    pub async fn shutdown(&self) {
        let _ = self.stop.send(true);
        let pods: Vec<_> = self.pods.lock().unwrap_or_else(|e| e.into_inner()).drain(..).collect();
        for p in pods {
            p.shutdown().await;
        }
        self.status_queue.close();
        let bg: Vec<_> = self.background.lock().unwrap_or_else(|e| e.into_inner()).drain(..).collect();
        for h in bg {
            h.abort();
            let _ = h.await;
        }
        self.events.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::{generate_corpus, CorpusSpec};

    #[tokio::test(start_paused = true)]
    async fn corpus_runs_to_completion() {
        let dir = tempfile::tempdir().unwrap();
        let config = PipelineConfig::default_config();
        let stack = Stack::open(dir.path(), config.clone(), Calibration::default()).unwrap();
        let corpus = generate_corpus(&CorpusSpec::new(6, 3), &config, &Calibration::default()).unwrap();
        let ids = stack.submit_corpus(&corpus).unwrap();
        stack.spawn_pods(2, 2);
        assert!(stack.wait_until_terminal(&ids, secs(600.0)).await);
        for id in &ids {
            assert_eq!(stack.state_of(id), Some(DocState::Completed));
            assert!(stack.store.blobs.exists(&crate::domain::BlobKey::result(id)));
        }
        stack.shutdown().await;
        assert_eq!(stack.monitor.violations(), 0);
        let report = stack.gateway.get_status(&ids[0]).unwrap();
        assert_eq!(report.state, DocState::Completed);
        assert!(report.total_cost > 0.0);
    }
}
