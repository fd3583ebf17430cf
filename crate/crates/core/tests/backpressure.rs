use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use docflow::clock::secs;
use docflow::gateway::{run_ingestion, ArrivalPattern};
use docflow::stack::Stack;
use docflow::worldgen::{generate_corpus, Calibration, CorpusSpec};
use docflow::PipelineConfig;

/// Peak visible worker-queue depth while `pattern` feeds 60 documents into
/// one pod of two tasks.
async fn peak_depth(pattern: ArrivalPattern) -> usize {
    let dir = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig::default_config();
    let cal = Calibration::default();
    let stack = Stack::open(dir.path(), cfg.clone(), cal.clone()).unwrap();
    stack.spawn_pods(1, 2);
    let corpus = generate_corpus(&CorpusSpec::new(60, 4), &cfg, &cal).unwrap();
    let peak = Arc::new(AtomicUsize::new(0));
    let sampler = {
        let (q, clock, peak) = (stack.queue.clone(), stack.clock.clone(), peak.clone());
        tokio::spawn(async move {
            loop {
                peak.fetch_max(q.depth().visible, Ordering::Relaxed);
                clock.sleep(secs(1.0)).await;
            }
        })
    };
    let arrivals = run_ingestion(&stack.gateway, &pattern, &corpus).await;
    let ids: Vec<_> = arrivals.into_iter().map(|a| a.result.unwrap().document_id).collect();
    assert!(stack.wait_until_terminal(&ids, secs(5_000.0)).await);
    sampler.abort();
    stack.shutdown().await;
    peak.load(Ordering::Relaxed)
}

#[tokio::test(start_paused = true)]
async fn bursty_arrivals_build_deeper_queue_than_steady_at_equal_rate() {
    // 20 docs every 240 s and 1 doc every 12 s both average 1/12 docs/s,
    // under the two-task service rate of ~0.11 docs/s
    let bursty = peak_depth(ArrivalPattern::scanner(20, 240.0)).await;
    let steady = peak_depth(ArrivalPattern::Steady { rate: 1.0 / 12.0 }).await;
    assert!(bursty > steady, "bursty {bursty} vs steady {steady}");
    assert!(steady <= 2, "steady load below capacity should not back up: {steady}");
}
