//! Shared helpers for the integration and acceptance targets.
#![allow(dead_code)]

pub mod queue_model;

use docflow::domain::{BlobKey, DocState};
use docflow::stack::Stack;

/// Queue entries (visible or leased) whose document is not fully durable:
/// missing record, missing page blob, or a pre-validation state.
pub fn orphan_entries(stack: &Stack) -> usize {
    stack
        .queue
        .pending_messages()
        .iter()
        .filter(|m| {
            let Ok(rec) = stack.store.tracking.get(&m.payload) else {
                return true;
            };
            let pages_ok = (0..rec.page_count).all(|i| stack.store.blobs.exists(&BlobKey::page(&m.payload, i)));
            !pages_ok || matches!(rec.status.state, DocState::Submitted | DocState::Failed(_))
        })
        .count()
}

pub mod scenarios;
