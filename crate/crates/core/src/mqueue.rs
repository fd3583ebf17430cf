//! In-process message queue with visibility-timeout leases.
//!
//! A received message stays invisible until its lease is acked, nacked or
//! expires. Expiry is evaluated lazily: on `receive`, `ack`, `nack`,
//! `depth` and explicit [`Queue::sweep`] calls, never by a background timer.
//! There is no lease extension; the visibility timeout must be sized above
//! the worst-case processing time.
//!
//! Visible messages are delivered in enqueue order, including messages
//! that become visible again after an expired or nacked lease. A message
//! whose delivery count has reached `max_deliveries` goes to the
//! dead-letter list instead of becoming visible again.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::sync::Notify;

use crate::clock::{Clock, Timestamp};
use crate::domain::{DocState, DocumentId};

/// Upper bound on a serialized payload, matching common brokers. Page
/// images (2–90 MiB) can never ride on a queue message.
pub const MAX_PAYLOAD_BYTES: usize = 256 * 1024;

pub const DEFAULT_MAX_DELIVERIES: u32 = 5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueueError {
    #[error("queue `{0}` is closed")]
    QueueClosed(String),
    #[error("payload of {0} bytes exceeds the {MAX_PAYLOAD_BYTES}-byte message limit")]
    PayloadTooLarge(usize),
    #[error("lease {0} has expired")]
    LeaseExpired(LeaseId),
    #[error("unknown lease {0}")]
    UnknownLease(LeaseId),
    #[error("visibility timeout must be positive")]
    InvalidVisibilityTimeout,
}

/// Anything that can ride on a queue message.
pub trait Payload: Clone + Send + Sync + 'static {
    /// Approximate serialized size in bytes.
    fn size_hint(&self) -> usize;
}

impl Payload for DocumentId {
    fn size_hint(&self) -> usize {
        self.as_str().len()
    }
}

impl Payload for Vec<u8> {
    fn size_hint(&self) -> usize {
        self.len()
    }
}

impl Payload for String {
    fn size_hint(&self) -> usize {
        self.len()
    }
}

/// Status-queue record published by workers on terminal outcomes.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatusNotification {
    pub document_id: DocumentId,
    pub state: DocState,
    pub at: Timestamp,
}

impl Payload for StatusNotification {
    fn size_hint(&self) -> usize {
        self.document_id.as_str().len() + 64
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MessageId(String);

impl MessageId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for MessageId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LeaseId(String);

impl LeaseId {
    pub fn new(id: impl Into<String>) -> Self {
        LeaseId(id.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for LeaseId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone)]
pub struct QueueMessage<P> {
    pub message_id: MessageId,
    pub payload: P,
    pub enqueued_at: Timestamp,
    pub delivery_count: u32,
}

/// A timed exclusive claim on one message.
#[derive(Debug, Clone)]
pub struct Lease<P> {
    pub lease_id: LeaseId,
    pub message_id: MessageId,
    pub holder_id: String,
    pub received_at: Timestamp,
    pub deadline: Timestamp,
    pub delivery_count: u32,
    pub payload: P,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct QueueDepth {
    pub visible: usize,
    pub in_flight: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NackOutcome {
    Requeued,
    DeadLettered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DeadLetterReason {
    MaxDeliveriesExceeded,
}

#[derive(Debug, Clone)]
pub struct DeadLetter<P> {
    pub message: QueueMessage<P>,
    pub reason: DeadLetterReason,
    pub at: Timestamp,
}

struct Stored<P> {
    message: QueueMessage<P>,
}

struct InFlight<P> {
    seq: u64,
    message: QueueMessage<P>,
    lease_id: LeaseId,
    deadline: Timestamp,
}

struct State<P> {
    next_seq: u64,
    visible: BTreeMap<u64, Stored<P>>,
    in_flight: BTreeMap<u64, InFlight<P>>,
    leases: HashMap<LeaseId, u64>,
    expired: HashSet<LeaseId>,
    dead: Vec<DeadLetter<P>>,
    closed: bool,
    total_deliveries: u64,
    redeliveries: u64,
}

pub struct Queue<P> {
    name: String,
    clock: Arc<dyn Clock>,
    max_deliveries: u32,
    state: Mutex<State<P>>,
    notify: Notify,
}

impl<P: Payload> Queue<P> {
    pub fn new(name: impl Into<String>, clock: Arc<dyn Clock>) -> Self {
        Self::with_max_deliveries(name, clock, DEFAULT_MAX_DELIVERIES)
    }

    pub fn with_max_deliveries(name: impl Into<String>, clock: Arc<dyn Clock>, max_deliveries: u32) -> Self {
        Queue {
            name: name.into(),
            clock,
            max_deliveries: max_deliveries.max(1),
            state: Mutex::new(State {
                next_seq: 0,
                visible: BTreeMap::new(),
                in_flight: BTreeMap::new(),
                leases: HashMap::new(),
                expired: HashSet::new(),
                dead: Vec::new(),
                closed: false,
                total_deliveries: 0,
                redeliveries: 0,
            }),
            notify: Notify::new(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    fn lock(&self) -> MutexGuard<'_, State<P>> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    pub fn enqueue(&self, payload: P) -> Result<MessageId, QueueError> {
        let size = payload.size_hint();
        if size > MAX_PAYLOAD_BYTES {
            return Err(QueueError::PayloadTooLarge(size));
        }
        let now = self.clock.now();
        let id = {
            let mut st = self.lock();
            if st.closed {
                return Err(QueueError::QueueClosed(self.name.clone()));
            }
            let seq = st.next_seq;
            st.next_seq += 1;
            let message_id = MessageId(format!("{}-{seq:08}", self.name));
            st.visible.insert(
                seq,
                Stored {
                    message: QueueMessage { message_id: message_id.clone(), payload, enqueued_at: now, delivery_count: 0 },
                },
            );
            message_id
        };
        self.notify.notify_waiters();
        Ok(id)
    }

    /// Leases the oldest visible message, if any.
    pub fn receive(&self, holder_id: &str, visibility_timeout: Duration) -> Result<Option<Lease<P>>, QueueError> {
        if visibility_timeout.is_zero() {
            return Err(QueueError::InvalidVisibilityTimeout);
        }
        let now = self.clock.now();
        let mut st = self.lock();
        self.sweep_locked(&mut st, now);
        let Some((&seq, _)) = st.visible.iter().next() else {
            return Ok(None);
        };
        let Stored { mut message } = st.visible.remove(&seq).expect("present");
        message.delivery_count += 1;
        st.total_deliveries += 1;
        if message.delivery_count > 1 {
            st.redeliveries += 1;
        }
        let lease_id = LeaseId(uuid::Uuid::new_v4().to_string());
        let deadline = now + visibility_timeout;
        let lease = Lease {
            lease_id: lease_id.clone(),
            message_id: message.message_id.clone(),
            holder_id: holder_id.to_owned(),
            received_at: now,
            deadline,
            delivery_count: message.delivery_count,
            payload: message.payload.clone(),
        };
        st.leases.insert(lease_id.clone(), seq);
        st.in_flight.insert(seq, InFlight { seq, message, lease_id, deadline });
        Ok(Some(lease))
    }

    /// Permanently removes the leased message.
    pub fn ack(&self, lease: &Lease<P>) -> Result<(), QueueError> {
        let now = self.clock.now();
        let mut st = self.lock();
        let seq = self.live_lease(&mut st, &lease.lease_id, now)?;
        st.leases.remove(&lease.lease_id);
        st.in_flight.remove(&seq);
        Ok(())
    }

    /// Returns the leased message to the visible set immediately.
    pub fn nack(&self, lease: &Lease<P>) -> Result<NackOutcome, QueueError> {
        let now = self.clock.now();
        let outcome = {
            let mut st = self.lock();
            let seq = self.live_lease(&mut st, &lease.lease_id, now)?;
            st.leases.remove(&lease.lease_id);
            let inflight = st.in_flight.remove(&seq).expect("leased message is in flight");
            self.release(&mut st, inflight, now)
        };
        if outcome == NackOutcome::Requeued {
            self.notify.notify_waiters();
        }
        Ok(outcome)
    }

    /// Returns expired leases to the visible set (or dead-letters them).
    pub fn sweep(&self) -> usize {
        let now = self.clock.now();
        let n = {
            let mut st = self.lock();
            self.sweep_locked(&mut st, now)
        };
        if n > 0 {
            self.notify.notify_waiters();
        }
        n
    }

    pub fn depth(&self) -> QueueDepth {
        let now = self.clock.now();
        let mut st = self.lock();
        self.sweep_locked(&mut st, now);
        QueueDepth { visible: st.visible.len(), in_flight: st.in_flight.len() }
    }

    pub fn is_empty(&self) -> bool {
        self.depth() == QueueDepth::default()
    }

    /// Counts of (all deliveries, redeliveries) since creation.
    pub fn delivery_stats(&self) -> (u64, u64) {
        let st = self.lock();
        (st.total_deliveries, st.redeliveries)
    }

    pub fn dead_letters(&self) -> Vec<DeadLetter<P>> {
        self.lock().dead.clone()
    }

    pub fn drain_dead_letters(&self) -> Vec<DeadLetter<P>> {
        std::mem::take(&mut self.lock().dead)
    }

    /// Snapshot of visible messages in delivery order.
    pub fn visible_messages(&self) -> Vec<QueueMessage<P>> {
        let now = self.clock.now();
        let mut st = self.lock();
        self.sweep_locked(&mut st, now);
        st.visible.values().map(|s| s.message.clone()).collect()
    }

    /// Snapshot of every message not yet acked or dead-lettered.
    pub fn pending_messages(&self) -> Vec<QueueMessage<P>> {
        let st = self.lock();
        let mut all: Vec<(u64, QueueMessage<P>)> = st
            .visible
            .iter()
            .map(|(k, s)| (*k, s.message.clone()))
            .chain(st.in_flight.values().map(|f| (f.seq, f.message.clone())))
            .collect();
        all.sort_by_key(|(k, _)| *k);
        all.into_iter().map(|(_, m)| m).collect()
    }

    pub fn close(&self) {
        self.lock().closed = true;
        self.notify.notify_waiters();
    }

    pub fn is_closed(&self) -> bool {
        self.lock().closed
    }

    /// Resolves when a message may have become visible. Spurious wakeups are
    /// possible, so callers re-check with `receive`.
    pub async fn notified(&self) {
        self.notify.notified().await;
    }

    fn live_lease(&self, st: &mut State<P>, lease_id: &LeaseId, now: Timestamp) -> Result<u64, QueueError> {
        if let Some(&seq) = st.leases.get(lease_id) {
            let deadline = st.in_flight[&seq].deadline;
            if now > deadline {
                self.sweep_locked(st, now);
                return Err(QueueError::LeaseExpired(lease_id.clone()));
            }
            return Ok(seq);
        }
        if st.expired.contains(lease_id) {
            Err(QueueError::LeaseExpired(lease_id.clone()))
        } else {
            Err(QueueError::UnknownLease(lease_id.clone()))
        }
    }

    fn sweep_locked(&self, st: &mut State<P>, now: Timestamp) -> usize {
        let expired: Vec<u64> = st.in_flight.values().filter(|f| now > f.deadline).map(|f| f.seq).collect();
        for seq in &expired {
            let inflight = st.in_flight.remove(seq).expect("present");
            st.leases.remove(&inflight.lease_id);
            st.expired.insert(inflight.lease_id.clone());
            self.release(st, inflight, now);
        }
        expired.len()
    }

    fn release(&self, st: &mut State<P>, inflight: InFlight<P>, now: Timestamp) -> NackOutcome {
        if inflight.message.delivery_count >= self.max_deliveries {
            st.dead.push(DeadLetter { message: inflight.message, reason: DeadLetterReason::MaxDeliveriesExceeded, at: now });
            NackOutcome::DeadLettered
        } else {
            st.visible.insert(inflight.seq, Stored { message: inflight.message });
            NackOutcome::Requeued
        }
    }
}
