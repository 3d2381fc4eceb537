//! Latency analysis over event logs: build a small synthetic run, derive
//! per-task component breakdowns and steering metrics, and print the
//! summary CSV exactly as `fedfabric report` would.
//!
//! ```bash
//! cargo run --example latency_report
//! ```

use fedfabric::bench::{
    derive_breakdowns, render_summary_csv, summarize, EventLog, MetricSummary, Stage,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let log_path = dir.path().join("events-thinker.jsonl");
    let log = EventLog::create(&log_path)?;

    // Twenty synthetic tasks with jittered spans and chained decisions.
    let mut t = 1_000_000_000u64; // 1 s into the run, in ns
    for i in 0..20u64 {
        let id = format!("demo-{i:02}");
        let jitter = (i % 5) * 400_000; // up to 2 ms
        let stamp = |log: &EventLog, stage, at: u64| log.record_at(&id, "simulate", stage, at);
        stamp(&log, Stage::Created, t);
        stamp(&log, Stage::Serialized, t + 2_000_000 + jitter);
        stamp(&log, Stage::SentToServer, t + 2_400_000 + jitter);
        stamp(&log, Stage::SentToRelay, t + 2_600_000 + jitter);
        stamp(&log, Stage::StartedOnWorker, t + 9_000_000 + jitter);
        stamp(&log, Stage::InputsResolved, t + 11_000_000 + jitter);
        stamp(&log, Stage::FinishedOnWorker, t + 51_000_000 + jitter);
        stamp(&log, Stage::ResultSerialized, t + 52_000_000 + jitter);
        stamp(&log, Stage::ResultPosted, t + 53_000_000 + jitter);
        stamp(&log, Stage::ResultReceived, t + 56_000_000 + jitter);
        stamp(&log, Stage::DecisionMade, t + 56_400_000 + jitter);
        stamp(&log, Stage::NextSubmitted, t + 56_600_000 + jitter);
        stamp(&log, Stage::DataResolved, t + 58_000_000 + jitter);
        t += 26_000_000; // overlapping lifetimes across two worker slots
    }

    let events = fedfabric::bench::read_events(&log_path, 0)?;
    let derived = derive_breakdowns(&events);
    println!(
        "derived {} breakdowns ({} incomplete, {} violations)\n",
        derived.breakdowns.len(),
        derived.incomplete,
        derived.violations.len()
    );

    println!("{}", render_summary_csv(&summarize(&derived)));

    if let Some(s) = MetricSummary::of(&derived.steering.decision_ms) {
        println!("decision time: median {:.2} ms (p40 {:.2}, p60 {:.2})", s.median, s.p40, s.p60);
    }
    if let Some(s) = MetricSummary::of(&derived.steering.dispatch_ms) {
        println!("dispatch time: median {:.2} ms over {} joined pairs", s.median, s.count);
    }

    let traces: Vec<&fedfabric::bench::TaskTrace> = derived.traces.iter().collect();
    if let Some(u) = fedfabric::bench::utilization(&traces, 2) {
        println!("worker utilization at 2 slots: {:.1}%", u * 100.0);
    }
    Ok(())
}
