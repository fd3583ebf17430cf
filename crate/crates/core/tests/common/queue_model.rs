//! Reference model for the lease queue. Random operation sequences are
//! applied to both the real queue and this model; any divergence, or any
//! broken ownership/no-loss/FIFO/redelivery property, is a violation.

use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;
use std::time::Duration;

use docflow::mqueue::{Lease, NackOutcome, Queue, QueueError};
use docflow::{Clock, ManualClock};
use proptest::prelude::*;

pub const MAX_DELIVERIES: u32 = 3;

#[derive(Debug, Clone)]
pub enum Op {
    Enqueue,
    Receive { holder: u8, vt_ms: u32 },
    Ack { pick: usize },
    Nack { pick: usize },
    Advance { ms: u32 },
    Sweep,
}

pub fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        3 => Just(Op::Enqueue),
        4 => (0u8..4, 1u32..400).prop_map(|(holder, vt_ms)| Op::Receive { holder, vt_ms }),
        2 => any::<usize>().prop_map(|pick| Op::Ack { pick }),
        1 => any::<usize>().prop_map(|pick| Op::Nack { pick }),
        2 => (0u32..300).prop_map(|ms| Op::Advance { ms }),
        1 => Just(Op::Sweep),
    ]
}

pub fn ops() -> impl Strategy<Value = Vec<Op>> {
    prop::collection::vec(op(), 1..60)
}

#[derive(Debug, Clone, PartialEq)]
enum Slot {
    Visible,
    Leased { lease: String, deadline_ms: u64 },
    Acked,
    Dead,
}

#[derive(Debug)]
struct Msg {
    slot: Slot,
    deliveries: u32,
}

/// Expected state: messages keyed by enqueue order (the payload).
#[derive(Default)]
struct Model {
    now_ms: u64,
    msgs: BTreeMap<u64, Msg>,
}

impl Model {
    fn expire(&mut self) {
        let now = self.now_ms;
        for m in self.msgs.values_mut() {
            if let Slot::Leased { deadline_ms, .. } = m.slot {
                if now > deadline_ms {
                    m.slot = if m.deliveries >= MAX_DELIVERIES { Slot::Dead } else { Slot::Visible };
                }
            }
        }
    }

    fn oldest_visible(&self) -> Option<u64> {
        self.msgs.iter().find(|(_, m)| m.slot == Slot::Visible).map(|(k, _)| *k)
    }

    fn count(&self, pred: impl Fn(&Slot) -> bool) -> usize {
        self.msgs.values().filter(|m| pred(&m.slot)).count()
    }
}

/// Runs `ops` against a fresh queue and the model. Returns a description of
/// the first violation.
pub fn check(ops: &[Op]) -> Result<(), String> {
    let clock = Arc::new(ManualClock::new());
    let q: Queue<String> = Queue::with_max_deliveries("prop", clock.clone() as Arc<dyn Clock>, MAX_DELIVERIES);
    let mut model = Model::default();
    let mut next = 0u64;
    // every lease ever handed out, live or not
    let mut leases: Vec<(u64, Lease<String>)> = Vec::new();

    for (i, op) in ops.iter().enumerate() {
        let ctx = |msg: String| format!("op {i} {op:?}: {msg}");
        match op {
            Op::Enqueue => {
                q.enqueue(next.to_string()).map_err(|e| ctx(e.to_string()))?;
                model.msgs.insert(next, Msg { slot: Slot::Visible, deliveries: 0 });
                next += 1;
            }
            Op::Receive { holder, vt_ms } => {
                model.expire();
                let got = q
                    .receive(&format!("h{holder}"), Duration::from_millis(*vt_ms as u64))
                    .map_err(|e| ctx(e.to_string()))?;
                match (got, model.oldest_visible()) {
                    (None, None) => {}
                    (Some(l), None) => return Err(ctx(format!("received {} with nothing visible", l.payload))),
                    (None, Some(k)) => return Err(ctx(format!("message {k} visible but not delivered"))),
                    (Some(l), Some(k)) => {
                        let got: u64 = l.payload.parse().unwrap();
                        if got != k {
                            return Err(ctx(format!("FIFO: got {got}, oldest visible is {k}")));
                        }
                        let m = model.msgs.get_mut(&k).unwrap();
                        m.deliveries += 1;
                        if l.delivery_count != m.deliveries {
                            return Err(ctx(format!("delivery count {} != {}", l.delivery_count, m.deliveries)));
                        }
                        m.slot = Slot::Leased {
                            lease: l.lease_id.as_str().to_owned(),
                            deadline_ms: model.now_ms + *vt_ms as u64,
                        };
                        leases.push((k, l));
                    }
                }
            }
            Op::Ack { pick } | Op::Nack { pick } => {
                if leases.is_empty() {
                    continue;
                }
                let (k, lease) = &leases[pick % leases.len()];
                model.expire();
                let m = model.msgs.get_mut(k).unwrap();
                let live = matches!(&m.slot, Slot::Leased { lease: id, .. } if id == lease.lease_id.as_str());
                let is_ack = matches!(op, Op::Ack { .. });
                let res = if is_ack { q.ack(lease).map(|_| None) } else { q.nack(lease).map(Some) };
                match (live, res) {
                    (true, Ok(None)) => m.slot = Slot::Acked,
                    (true, Ok(Some(outcome))) => {
                        let dead = m.deliveries >= MAX_DELIVERIES;
                        let want = if dead { NackOutcome::DeadLettered } else { NackOutcome::Requeued };
                        if outcome != want {
                            return Err(ctx(format!("nack outcome {outcome:?}, expected {want:?}")));
                        }
                        m.slot = if dead { Slot::Dead } else { Slot::Visible };
                    }
                    (true, Err(e)) => return Err(ctx(format!("live lease rejected: {e}"))),
                    (false, Ok(_)) => return Err(ctx("ownership: stale lease accepted".into())),
                    (false, Err(QueueError::LeaseExpired(_) | QueueError::UnknownLease(_))) => {}
                    (false, Err(e)) => return Err(ctx(format!("unexpected error {e}"))),
                }
            }
            Op::Advance { ms } => {
                clock.advance(Duration::from_millis(*ms as u64));
                model.now_ms += *ms as u64;
            }
            Op::Sweep => {
                let before = model.count(|s| matches!(s, Slot::Leased { .. }));
                model.expire();
                let after = model.count(|s| matches!(s, Slot::Leased { .. }));
                let n = q.sweep();
                if n != before - after {
                    return Err(ctx(format!("sweep expired {n}, expected {}", before - after)));
                }
            }
        }
        invariants(&q, &mut model, next).map_err(ctx)?;
    }
    Ok(())
}

fn invariants(q: &Queue<String>, model: &mut Model, enqueued: u64) -> Result<(), String> {
    model.expire();
    // depth() applies lazy expiry, so the snapshots below are current
    let depth = q.depth();
    // no loss: pending + acked + dead == enqueued
    let pending = q.pending_messages();
    let dead = q.dead_letters();
    let acked = model.count(|s| *s == Slot::Acked);
    if pending.len() + dead.len() + acked != enqueued as usize {
        return Err(format!("no-loss: {} pending + {} dead + {acked} acked != {enqueued}", pending.len(), dead.len()));
    }
    // visible set and its order match the model
    let visible: Vec<u64> = q.visible_messages().iter().map(|m| m.payload.parse().unwrap()).collect();
    let expect: Vec<u64> = model.msgs.iter().filter(|(_, m)| m.slot == Slot::Visible).map(|(k, _)| *k).collect();
    if visible != expect {
        return Err(format!("visible {visible:?} != model {expect:?}"));
    }
    if !visible.windows(2).all(|w| w[0] < w[1]) {
        return Err(format!("FIFO: visible order {visible:?}"));
    }
    // exclusive ownership: at most one live lease per message
    let mut live: HashMap<u64, usize> = HashMap::new();
    for (k, m) in &model.msgs {
        if matches!(m.slot, Slot::Leased { .. }) {
            *live.entry(*k).or_default() += 1;
        }
    }
    if depth.in_flight != live.len() || depth.visible != expect.len() {
        return Err(format!("depth {depth:?} vs model {} visible / {} leased", expect.len(), live.len()));
    }
    let dead_ids: Vec<u64> = dead.iter().map(|d| d.message.payload.parse().unwrap()).collect();
    for k in &dead_ids {
        if model.msgs[k].slot != Slot::Dead {
            return Err(format!("message {k} dead-lettered early"));
        }
    }
    if dead_ids.len() != model.count(|s| *s == Slot::Dead) {
        return Err("dead-letter count mismatch".into());
    }
    Ok(())
}
