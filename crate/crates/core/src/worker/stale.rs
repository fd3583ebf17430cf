//! Stale-processing detection.
//!
//! A document is stale when it is non-terminal, has started processing and
//! has been at it longer than the threshold. The sweeper only marks status;
//! the document comes back through lease expiry and redelivery.

use std::time::Duration;

use tokio::sync::watch;
use tokio::task::JoinHandle;

use crate::clock::{secs, Timestamp};
use crate::domain::{DocState, DocumentId, StatusEvent};
use crate::store::StatusView;

use super::{EventKind, WorkerContext};

const SWEEPER: &str = "sweeper";

/// Ids of stale documents. Documents already marked stale are skipped.
pub fn detect_stale(views: &[StatusView], threshold: Duration, now: Timestamp) -> Vec<DocumentId> {
    views
        .iter()
        .filter(|v| !v.state.is_terminal() && !matches!(v.state, DocState::Stale(_)))
        .filter(|v| v.processing_start_time.is_some_and(|t| now.saturating_since(t) > threshold))
        .map(|v| v.document_id.clone())
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SweepReport {
    pub stale: Vec<DocumentId>,
    pub expired_leases: usize,
    pub dead_lettered: Vec<DocumentId>,
}

pub fn sweep_once(ctx: &WorkerContext) -> SweepReport {
    let now = ctx.now();
    let expired_leases = ctx.queue.sweep();
    let views = ctx.store.tracking.status_view();
    let mut stale = Vec::new();
    for id in detect_stale(&views, ctx.config.stale_threshold(), now) {
        let view = views.iter().find(|v| v.document_id == id).expect("id came from views");
        if ctx.store.tracking.update_status(&id, &StatusEvent::StaleDetected, view.delivery_count).is_ok() {
            let pst = view.processing_start_time.expect("stale implies started");
            ctx.log(SWEEPER, Some(&id), EventKind::StaleDetected { processing_start_time: pst });
            stale.push(id);
        }
    }
    let mut dead_lettered = Vec::new();
    for dl in ctx.queue.drain_dead_letters() {
        ctx.fail_dead_letter(SWEEPER, &dl.message.payload);
        dead_lettered.push(dl.message.payload);
    }
    SweepReport { stale, expired_leases, dead_lettered }
}

/// Runs `sweep_once` every `sweep_interval` model seconds until told to stop.
pub fn spawn_sweeper(ctx: WorkerContext, mut stop: watch::Receiver<bool>) -> JoinHandle<()> {
    tokio::spawn(async move {
        let interval = secs(ctx.config.worker.sweep_interval);
        loop {
            tokio::select! {
                _ = ctx.clock.sleep(interval) => {}
                _ = stop.changed() => {}
            }
            if *stop.borrow() {
                break;
            }
            sweep_once(&ctx);
        }
    })
}
