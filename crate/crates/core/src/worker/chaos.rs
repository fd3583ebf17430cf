//! Fault injection and ownership instrumentation for chaos tests.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use crate::clock::Timestamp;
use crate::domain::{DocumentId, Step};

#[derive(Debug, Clone)]
struct CrashRule {
    document: Option<DocumentId>,
    after_step: Step,
    remaining: u32,
}

/// Kills a document's executor right after a step's checkpoint is saved.
#[derive(Debug, Default)]
pub struct CrashInjector {
    rules: Mutex<Vec<CrashRule>>,
}

impl CrashInjector {
    pub fn new() -> Self {
        Self::default()
    }

    /// Crash the next `times` executions of `document` (any document if
    /// `None`) that complete `after_step`.
    pub fn crash_after(&self, document: Option<DocumentId>, after_step: Step, times: u32) {
        self.rules.lock().unwrap_or_else(|e| e.into_inner()).push(CrashRule { document, after_step, remaining: times });
    }

    pub fn should_crash(&self, document: &DocumentId, step: Step) -> bool {
        let mut rules = self.rules.lock().unwrap_or_else(|e| e.into_inner());
        for r in rules.iter_mut() {
            if r.remaining > 0 && r.after_step == step && r.document.as_ref().is_none_or(|d| d == document) {
                r.remaining -= 1;
                return true;
            }
        }
        false
    }
}

#[derive(Debug, Clone)]
struct Claim {
    holder: String,
    deadline: Timestamp,
}

/// Records every executor of a document with its lease deadline and counts
/// overlaps. Two executors at once is only legal if the earlier lease has
/// expired (at-least-once redelivery); overlap under two live leases is a
/// single-owner violation.
#[derive(Debug, Default)]
pub struct OwnershipMonitor {
    active: Mutex<HashMap<DocumentId, Vec<Claim>>>,
    violations: AtomicU64,
    overlaps: AtomicU64,
}

impl OwnershipMonitor {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the holder of a conflicting live lease, if any.
    pub fn enter(&self, doc: &DocumentId, holder: &str, deadline: Timestamp, now: Timestamp) -> Option<String> {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        let claims = active.entry(doc.clone()).or_default();
        if !claims.is_empty() {
            self.overlaps.fetch_add(1, Ordering::Relaxed);
        }
        let conflict = claims.iter().find(|c| c.deadline >= now).map(|c| c.holder.clone());
        if conflict.is_some() {
            self.violations.fetch_add(1, Ordering::Relaxed);
        }
        claims.push(Claim { holder: holder.to_owned(), deadline });
        conflict
    }

    pub fn exit(&self, doc: &DocumentId, holder: &str) {
        let mut active = self.active.lock().unwrap_or_else(|e| e.into_inner());
        if let Some(claims) = active.get_mut(doc) {
            claims.retain(|c| c.holder != holder);
            if claims.is_empty() {
                active.remove(doc);
            }
        }
    }

    /// Concurrent executors under two live leases.
    pub fn violations(&self) -> u64 {
        self.violations.load(Ordering::Relaxed)
    }

    /// Concurrent executors of any kind (includes post-expiry redelivery).
    pub fn overlaps(&self) -> u64 {
        self.overlaps.load(Ordering::Relaxed)
    }

    pub fn active_executors(&self) -> usize {
        self.active.lock().unwrap_or_else(|e| e.into_inner()).values().map(Vec::len).sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn crash_rules_are_consumed() {
        let c = CrashInjector::new();
        let d = DocumentId::new("d");
        c.crash_after(Some(d.clone()), Step::Ocr, 1);
        assert!(!c.should_crash(&d, Step::Classify));
        assert!(c.should_crash(&d, Step::Ocr));
        assert!(!c.should_crash(&d, Step::Ocr));
    }

    #[test]
    fn overlap_after_expiry_is_not_a_violation() {
        let m = OwnershipMonitor::new();
        let d = DocumentId::new("d");
        m.enter(&d, "a", Timestamp::from_secs_f64(30.0), Timestamp::ZERO);
        assert_eq!(m.enter(&d, "b", Timestamp::from_secs_f64(61.0), Timestamp::from_secs_f64(31.0)), None);
        assert_eq!((m.violations(), m.overlaps()), (0, 1));
        assert_eq!(m.enter(&d, "c", Timestamp::from_secs_f64(90.0), Timestamp::from_secs_f64(40.0)), Some("b".into()));
        assert_eq!(m.violations(), 1);
        m.exit(&d, "a");
        m.exit(&d, "b");
        m.exit(&d, "c");
        assert_eq!(m.active_executors(), 0);
    }
}
