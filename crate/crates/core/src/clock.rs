//! Model-time clocks.
//!
//! All timestamps and durations in the system are expressed in *model
//! seconds* (the units the latency profiles are calibrated in). A
//! [`ScaledClock`] maps model time onto the tokio clock through a
//! `time_scale` multiplier, so with `time_scale = 0.01` one model second
//! takes ten wall milliseconds. When the tokio runtime is paused the same
//! clock runs on virtual time.

use std::fmt;
use std::ops::Add;
use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use serde::{Deserialize, Serialize};

/// A point in model time, in microseconds since the clock origin.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);

    pub const fn from_micros(us: u64) -> Self {
        Timestamp(us)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Timestamp((secs.max(0.0) * 1e6).round() as u64)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    /// Elapsed model time since `earlier`, zero if `earlier` is later.
    pub fn saturating_since(self, earlier: Timestamp) -> Duration {
        Duration::from_micros(self.0.saturating_sub(earlier.0))
    }
}

impl Add<Duration> for Timestamp {
    type Output = Timestamp;

    fn add(self, rhs: Duration) -> Timestamp {
        Timestamp(self.0.saturating_add(rhs.as_micros() as u64))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.as_secs_f64())
    }
}

/// Source of model time. Queues and stores only need to read the clock.
pub trait Clock: Send + Sync {
    fn now(&self) -> Timestamp;
}

/// A clock that only moves when told to. Used by tests for lease expiry.
#[derive(Debug, Default)]
pub struct ManualClock {
    now_us: AtomicU64,
}

impl ManualClock {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn at(ts: Timestamp) -> Self {
        ManualClock { now_us: AtomicU64::new(ts.as_micros()) }
    }

    pub fn advance(&self, by: Duration) {
        self.now_us.fetch_add(by.as_micros() as u64, Ordering::SeqCst);
    }

    pub fn set(&self, ts: Timestamp) {
        self.now_us.store(ts.as_micros(), Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Timestamp {
        Timestamp(self.now_us.load(Ordering::SeqCst))
    }
}

/// Model time derived from the tokio clock: `model = wall / time_scale`.
#[derive(Debug, Clone)]
pub struct ScaledClock {
    origin: tokio::time::Instant,
    time_scale: f64,
}

impl ScaledClock {
    /// Must be called from within a tokio runtime context.
    pub fn new(time_scale: f64) -> Self {
        assert!(time_scale > 0.0, "time_scale must be positive");
        ScaledClock { origin: tokio::time::Instant::now(), time_scale }
    }

    pub fn time_scale(&self) -> f64 {
        self.time_scale
    }

    /// Converts a model duration to the wall duration it occupies.
    pub fn to_wall(&self, model: Duration) -> Duration {
        model.mul_f64(self.time_scale)
    }

    pub async fn sleep(&self, model: Duration) {
        if !model.is_zero() {
            tokio::time::sleep(self.to_wall(model)).await;
        }
    }

    pub async fn sleep_until(&self, deadline: Timestamp) {
        let now = self.now();
        self.sleep(deadline.saturating_since(now)).await;
    }
}

impl Clock for ScaledClock {
    fn now(&self) -> Timestamp {
        let wall = self.origin.elapsed();
        Timestamp::from_secs_f64(wall.as_secs_f64() / self.time_scale)
    }
}

/// Model duration from fractional seconds; negative inputs clamp to zero.
pub fn secs(s: f64) -> Duration {
    Duration::from_secs_f64(s.max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manual_clock_advances() {
        let c = ManualClock::new();
        c.advance(Duration::from_secs(30));
        assert_eq!(c.now(), Timestamp::from_secs_f64(30.0));
    }

    #[tokio::test(start_paused = true)]
    async fn scaled_clock_maps_wall_to_model_time() {
        let c = ScaledClock::new(0.01);
        c.sleep(Duration::from_secs(300)).await;
        let now = c.now().as_secs_f64();
        assert!((now - 300.0).abs() < 1e-3, "now = {now}");
    }
}
