//! Document processing status machine.
//!
//! `Processing(s)` names the earliest configured step whose output has not
//! yet been recorded; progress only moves forward in pipeline order.
//!
//! | from            | event                   | to                                   |
//! |-----------------|-------------------------|--------------------------------------|
//! | Submitted       | Validated               | Queued                               |
//! | Submitted       | StepFailed              | Failed(reason)                       |
//! | Queued          | WorkerPulled            | Processing(first step)               |
//! | Queued          | Redelivered             | Processing(first step)               |
//! | Queued          | StepFailed              | Failed(reason)                       |
//! | Processing(s)   | StepCompleted(t), t < s | Processing(s) (late duplicate)       |
//! | Processing(s)   | StepCompleted(t), t ≥ s | Processing(next(t)), or t if last    |
//! | Processing(s)   | AllStepsCompleted       | Completed, only when s is last       |
//! | Processing(s)   | Redelivered             | Processing(s)                        |
//! | Processing(s)   | StaleDetected           | Stale(s)                             |
//! | Processing(s)   | StepFailed              | Failed(reason)                       |
//! | Stale(s)        | WorkerPulled            | Processing(s)                        |
//! | Stale(s)        | Redelivered             | Processing(s)                        |
//! | Stale(s)        | StepCompleted(t)        | as from Processing(s)                |
//! | Stale(s)        | AllStepsCompleted       | Completed, only when s is last       |
//! | Stale(s)        | StaleDetected           | Stale(s)                             |
//! | Stale(s)        | StepFailed              | Failed(reason)                       |
//!
//! Every other pair, and every event on `Completed` or `Failed`, is an
//! [`TransitionError::InvalidTransition`].

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::Step;
use crate::clock::Timestamp;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "state", content = "detail", rename_all = "snake_case")]
pub enum DocState {
    Submitted,
    Queued,
    Processing(Step),
    Completed,
    Failed(String),
    Stale(Step),
}

impl DocState {
    pub fn is_terminal(&self) -> bool {
        matches!(self, DocState::Completed | DocState::Failed(_))
    }
}

impl fmt::Display for DocState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DocState::Submitted => f.write_str("submitted"),
            DocState::Queued => f.write_str("queued"),
            DocState::Processing(s) => write!(f, "processing({s})"),
            DocState::Completed => f.write_str("completed"),
            DocState::Failed(r) => write!(f, "failed({r})"),
            DocState::Stale(s) => write!(f, "stale({s})"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", content = "detail", rename_all = "snake_case")]
pub enum StatusEvent {
    Validated,
    WorkerPulled,
    StepCompleted(Step),
    AllStepsCompleted,
    StepFailed { step: Option<Step>, reason: String },
    StaleDetected,
    Redelivered,
}

impl StatusEvent {
    /// Short stable name, used for idempotency keys.
    pub fn key(&self) -> String {
        match self {
            StatusEvent::Validated => "validated".into(),
            StatusEvent::WorkerPulled => "worker_pulled".into(),
            StatusEvent::StepCompleted(s) => format!("step_completed:{s}"),
            StatusEvent::AllStepsCompleted => "all_steps_completed".into(),
            StatusEvent::StepFailed { step, reason } => match step {
                Some(s) => format!("step_failed:{s}:{reason}"),
                None => format!("step_failed::{reason}"),
            },
            StatusEvent::StaleDetected => "stale_detected".into(),
            StatusEvent::Redelivered => "redelivered".into(),
        }
    }
}

impl fmt::Display for StatusEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key())
    }
}

/// Processing state plus the bookkeeping that must survive worker restarts.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentStatus {
    pub state: DocState,
    /// Set at the first Inference Service call for the document, never before.
    pub processing_start_time: Option<Timestamp>,
    /// Mirrored from the worker queue; zero until the first delivery.
    pub delivery_count: u32,
}

impl DocumentStatus {
    pub fn submitted() -> Self {
        DocumentStatus { state: DocState::Submitted, processing_start_time: None, delivery_count: 0 }
    }

    pub fn with_state(&self, state: DocState) -> Self {
        DocumentStatus { state, ..self.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransitionError {
    #[error("invalid transition from {status} on {event}")]
    InvalidTransition { status: DocState, event: StatusEvent },
    #[error("step {0} is not in the configured pipeline")]
    UnknownStep(Step),
}

/// Applies `event` to `status` for a document whose pipeline is `steps`.
pub fn transition(status: &DocumentStatus, event: &StatusEvent, steps: &[Step]) -> Result<DocumentStatus, TransitionError> {
    use DocState as S;
    use StatusEvent as E;

    let invalid = || TransitionError::InvalidTransition { status: status.state.clone(), event: event.clone() };
    let index_of = |step: Step| steps.iter().position(|s| *s == step).ok_or(TransitionError::UnknownStep(step));
    let first = || steps.first().copied().ok_or_else(invalid);
    let last = steps.last().copied();

    let advance = |current: Step, done: Step| -> Result<DocState, TransitionError> {
        let cur = index_of(current)?;
        let idx = index_of(done)?;
        if idx < cur {
            return Ok(S::Processing(current));
        }
        Ok(S::Processing(steps.get(idx + 1).copied().unwrap_or(done)))
    };

    let next = match (&status.state, event) {
        (S::Submitted, E::Validated) => S::Queued,
        (S::Submitted | S::Queued, E::StepFailed { reason, .. }) => S::Failed(reason.clone()),
        (S::Queued, E::WorkerPulled | E::Redelivered) => S::Processing(first()?),

        (S::Processing(cur) | S::Stale(cur), E::StepCompleted(done)) => advance(*cur, *done)?,
        (S::Processing(cur) | S::Stale(cur), E::AllStepsCompleted) if Some(*cur) == last => S::Completed,
        (S::Processing(cur), E::Redelivered) => S::Processing(*cur),
        (S::Processing(cur) | S::Stale(cur), E::StaleDetected) => S::Stale(*cur),
        (S::Processing(_) | S::Stale(_), E::StepFailed { reason, .. }) => S::Failed(reason.clone()),
        (S::Stale(cur), E::WorkerPulled | E::Redelivered) => S::Processing(*cur),

        _ => return Err(invalid()),
    };
    Ok(status.with_state(next))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const FULL: [Step; 4] = [Step::Classify, Step::Ocr, Step::Stitch, Step::Parse];

    fn st(state: DocState) -> DocumentStatus {
        DocumentStatus::submitted().with_state(state)
    }

    #[test]
    fn queued_worker_pulled_enters_first_step() {
        let out = transition(&st(DocState::Queued), &StatusEvent::WorkerPulled, &FULL).unwrap();
        assert_eq!(out.state, DocState::Processing(Step::Classify));
    }

    #[test]
    fn processing_parse_all_steps_completed_is_completed() {
        let out = transition(&st(DocState::Processing(Step::Parse)), &StatusEvent::AllStepsCompleted, &FULL).unwrap();
        assert_eq!(out.state, DocState::Completed);
    }

    #[test]
    fn completed_rejects_worker_pulled() {
        let err = transition(&st(DocState::Completed), &StatusEvent::WorkerPulled, &FULL).unwrap_err();
        assert!(matches!(err, TransitionError::InvalidTransition { .. }));
    }

    #[test]
    fn all_steps_completed_requires_last_step() {
        let err = transition(&st(DocState::Processing(Step::Ocr)), &StatusEvent::AllStepsCompleted, &FULL);
        assert!(err.is_err());
    }

    #[test]
    fn step_completion_advances_and_late_duplicates_are_no_ops() {
        let s = transition(&st(DocState::Processing(Step::Classify)), &StatusEvent::StepCompleted(Step::Classify), &FULL).unwrap();
        assert_eq!(s.state, DocState::Processing(Step::Ocr));
        let s = transition(&s, &StatusEvent::StepCompleted(Step::Ocr), &FULL).unwrap();
        assert_eq!(s.state, DocState::Processing(Step::Stitch));
        let again = transition(&s, &StatusEvent::StepCompleted(Step::Classify), &FULL).unwrap();
        assert_eq!(again.state, DocState::Processing(Step::Stitch));
        let s = transition(&s, &StatusEvent::StepCompleted(Step::Parse), &FULL).unwrap();
        assert_eq!(s.state, DocState::Processing(Step::Parse));
    }

    #[test]
    fn stale_is_not_terminal() {
        let s = transition(&st(DocState::Processing(Step::Ocr)), &StatusEvent::StaleDetected, &FULL).unwrap();
        assert_eq!(s.state, DocState::Stale(Step::Ocr));
        let s = transition(&s, &StatusEvent::Redelivered, &FULL).unwrap();
        assert_eq!(s.state, DocState::Processing(Step::Ocr));
    }

    #[test]
    fn unknown_step_is_reported() {
        let err = transition(&st(DocState::Processing(Step::Ocr)), &StatusEvent::StepCompleted(Step::Metadata), &FULL).unwrap_err();
        assert_eq!(err, TransitionError::UnknownStep(Step::Metadata));
    }

    fn any_event() -> impl Strategy<Value = StatusEvent> {
        prop_oneof![
            Just(StatusEvent::Validated),
            Just(StatusEvent::WorkerPulled),
            prop::sample::select(FULL.to_vec()).prop_map(StatusEvent::StepCompleted),
            Just(StatusEvent::AllStepsCompleted),
            Just(StatusEvent::StepFailed { step: None, reason: "boom".into() }),
            Just(StatusEvent::StaleDetected),
            Just(StatusEvent::Redelivered),
        ]
    }

    proptest! {
        #[test]
        fn transition_is_deterministic(events in prop::collection::vec(any_event(), 0..40)) {
            let mut status = DocumentStatus::submitted();
            for e in &events {
                let a = transition(&status, e, &FULL);
                let b = transition(&status, e, &FULL);
                prop_assert_eq!(&a, &b);
                if let Ok(next) = a {
                    status = next;
                }
            }
        }

        #[test]
        fn completed_only_via_single_all_steps_completed(events in prop::collection::vec(any_event(), 0..60)) {
            let mut status = DocumentStatus::submitted();
            let mut accepted_completions = 0;
            for e in &events {
                if let Ok(next) = transition(&status, e, &FULL) {
                    if *e == StatusEvent::AllStepsCompleted {
                        accepted_completions += 1;
                    }
                    status = next;
                }
            }
            if status.state == DocState::Completed {
                prop_assert_eq!(accepted_completions, 1);
            } else {
                prop_assert_eq!(accepted_completions, 0);
            }
        }

        #[test]
        fn terminal_states_reject_everything(e in any_event()) {
            for state in [DocState::Completed, DocState::Failed("x".into())] {
                prop_assert!(transition(&st(state), &e, &FULL).is_err());
            }
        }
    }
}
