use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use tokio::sync::{Semaphore, SemaphorePermit};

use crate::clock::{Clock, Timestamp};

use super::InferenceError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapacityClass {
    /// Local models sharing GPU slots: clip, ocr, detector.
    Gpu,
    /// External provider calls: vlm classify/detect, parse.
    Api,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LimiterStats {
    pub slots: usize,
    pub executing: usize,
    pub waiting: usize,
    pub peak_executing: usize,
    pub busy_slot_seconds: f64,
    /// Busy slot-time over `slots × elapsed` since the limiter was created.
    pub utilization: f64,
}

struct Inner {
    waiting: usize,
    executing: usize,
    peak: usize,
    busy_us: u128,
    last_change: Timestamp,
    /// `(time, executing count from then on)` at every change.
    trace: Vec<(Timestamp, usize)>,
}

/// A FIFO-fair counting limiter with occupancy accounting.
pub struct Limiter {
    class: CapacityClass,
    slots: usize,
    max_waiting: Option<usize>,
    sem: Semaphore,
    clock: Arc<dyn Clock>,
    origin: Timestamp,
    inner: Mutex<Inner>,
}

pub struct SlotGuard<'a> {
    limiter: &'a Limiter,
    _permit: SemaphorePermit<'a>,
}

impl Drop for SlotGuard<'_> {
    fn drop(&mut self) {
        let now = self.limiter.clock.now();
        let mut st = self.limiter.lock();
        Limiter::accrue(&mut st, now);
        st.executing -= 1;
        let executing = st.executing;
        st.trace.push((now, executing));
    }
}

impl Limiter {
    pub fn new(class: CapacityClass, slots: usize, max_waiting: Option<usize>, clock: Arc<dyn Clock>) -> Self {
        assert!(slots >= 1, "limiter needs at least one slot");
        let origin = clock.now();
        Limiter {
            class,
            slots,
            max_waiting,
            sem: Semaphore::new(slots),
            clock,
            origin,
            inner: Mutex::new(Inner { waiting: 0, executing: 0, peak: 0, busy_us: 0, last_change: origin, trace: vec![(origin, 0)] }),
        }
    }

    pub fn class(&self) -> CapacityClass {
        self.class
    }

    pub fn slots(&self) -> usize {
        self.slots
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn accrue(st: &mut Inner, now: Timestamp) {
        let dt = now.saturating_since(st.last_change).as_micros();
        st.busy_us += dt * st.executing as u128;
        st.last_change = st.last_change.max(now);
    }

    /// Waits (without spinning) for a slot. Fails fast with `Overloaded`
    /// when a wait-queue cap is configured and reached.
    pub async fn acquire(&self) -> Result<SlotGuard<'_>, InferenceError> {
        {
            let mut st = self.lock();
            if let Some(cap) = self.max_waiting {
                if self.sem.available_permits() == 0 && st.waiting >= cap {
                    return Err(InferenceError::Overloaded(format!("{:?} wait queue full ({cap})", self.class)));
                }
            }
            st.waiting += 1;
        }
        struct Waiting<'a>(&'a Limiter, bool);
        impl Drop for Waiting<'_> {
            fn drop(&mut self) {
                if self.1 {
                    self.0.lock().waiting -= 1;
                }
            }
        }
        let mut w = Waiting(self, true);
        let permit = self.sem.acquire().await.expect("limiter semaphore is never closed");
        w.1 = false;
        let now = self.clock.now();
        {
            let mut st = self.lock();
            st.waiting -= 1;
            Self::accrue(&mut st, now);
            st.executing += 1;
            st.peak = st.peak.max(st.executing);
            let executing = st.executing;
            st.trace.push((now, executing));
        }
        Ok(SlotGuard { limiter: self, _permit: permit })
    }

    pub fn stats(&self) -> LimiterStats {
        let now = self.clock.now();
        let mut st = self.lock();
        Self::accrue(&mut st, now);
        let elapsed = now.saturating_since(self.origin).as_secs_f64();
        let busy = st.busy_us as f64 / 1e6;
        LimiterStats {
            slots: self.slots,
            executing: st.executing,
            waiting: st.waiting,
            peak_executing: st.peak,
            busy_slot_seconds: busy,
            utilization: if elapsed > 0.0 { busy / (elapsed * self.slots as f64) } else { 0.0 },
        }
    }

    /// Fraction of slot capacity busy over `[from, to]`.
    pub fn utilization_between(&self, from: Timestamp, to: Timestamp) -> f64 {
        if to <= from {
            return 0.0;
        }
        let st = self.lock();
        let mut busy = 0.0;
        for (i, &(t, n)) in st.trace.iter().enumerate() {
            let end = st.trace.get(i + 1).map_or(to, |x| x.0);
            let a = t.max(from);
            let b = end.min(to);
            if b > a {
                busy += b.saturating_since(a).as_secs_f64() * n as f64;
            }
        }
        busy / (to.saturating_since(from).as_secs_f64() * self.slots as f64)
    }
}
