mod common;

use std::collections::HashSet;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use common::queue_model::{check, ops, Op};
use docflow::mqueue::Queue;
use docflow::{Clock, ManualClock};
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn queue_matches_reference_model(ops in ops()) {
        if let Err(v) = check(&ops) {
            prop_assert!(false, "{}", v);
        }
    }
}

#[test]
fn expired_lease_is_redelivered_in_order() {
    let ops = [
        Op::Enqueue,
        Op::Enqueue,
        Op::Receive { holder: 0, vt_ms: 10 },
        Op::Advance { ms: 11 },
        Op::Receive { holder: 1, vt_ms: 10 },
        Op::Ack { pick: 0 },
        Op::Ack { pick: 1 },
        Op::Receive { holder: 1, vt_ms: 10 },
        Op::Ack { pick: 2 },
    ];
    check(&ops).unwrap();
}

#[test]
fn concurrent_receivers_never_share_a_message() {
    let clock = Arc::new(ManualClock::new());
    let q: Arc<Queue<String>> = Arc::new(Queue::new("c", clock as Arc<dyn Clock>));
    for i in 0..2_000 {
        q.enqueue(i.to_string()).unwrap();
    }
    let seen = Arc::new(Mutex::new(HashSet::new()));
    let threads: Vec<_> = (0..4)
        .map(|t| {
            let (q, seen) = (q.clone(), seen.clone());
            std::thread::spawn(move || {
                while let Some(l) = q.receive(&format!("t{t}"), Duration::from_secs(60)).unwrap() {
                    assert!(seen.lock().unwrap().insert(l.payload.clone()), "{} leased twice", l.payload);
                    q.ack(&l).unwrap();
                }
            })
        })
        .collect();
    for t in threads {
        t.join().unwrap();
    }
    assert_eq!(seen.lock().unwrap().len(), 2_000);
    assert!(q.is_empty());
}
