//! A queue-driven document understanding pipeline.
//!
//! Three services cooperate through narrow contracts:
//!
//! - the [`gateway`] accepts submissions, persists page blobs and tracking
//!   records, and enqueues lightweight document references;
//! - [`worker`] pods lease documents from the worker queue and run the
//!   configured per-document pipeline with checkpoint/resume;
//! - the [`inference`] service executes model calls behind a GPU-slot
//!   limiter and an API-concurrency limiter.
//!
//! Model backends are simulated by [`worldgen`], whose samplers are pure
//! functions of identifiers and a seed. The [`profiler`] drives batch
//! experiments over a full [`stack`] and reports throughput, tail latency,
//! cost attribution and the active bottleneck tier.

pub mod clock;
pub mod domain;
pub mod gateway;
pub mod hash;
pub mod inference;
pub mod mqueue;
pub mod profiler;
pub mod stack;
pub mod store;
pub mod worker;
pub mod worldgen;

pub use clock::{Clock, ManualClock, ScaledClock, Timestamp};
pub use domain::{DocumentId, PipelineConfig, Step};
