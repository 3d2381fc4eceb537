//! Pure analysis over merged event logs: per-task breakdowns, stage-order
//! validation, steering metrics, idle gaps, and utilization.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use super::{EventRecord, LatencyBreakdown, Stage, SteeringMetrics, MARKER_TOPIC};

/// Stage timestamps of one task after merging.
#[derive(Debug, Clone, Default)]
pub struct TaskTrace {
    pub task_id: String,
    pub topic: String,
    pub stamps: HashMap<Stage, u64>,
}

impl TaskTrace {
    pub fn get(&self, stage: Stage) -> Option<u64> {
        self.stamps.get(&stage).copied()
    }

    fn span_ms(&self, from: Stage, to: Stage) -> Option<f64> {
        let a = self.get(from)?;
        let b = self.get(to)?;
        Some((b as f64 - a as f64) / 1e6)
    }
}

/// Everything derived from one event log.
#[derive(Debug, Default)]
pub struct DerivedMetrics {
    pub breakdowns: Vec<LatencyBreakdown>,
    pub steering: SteeringMetrics,
    pub traces: Vec<TaskTrace>,
    /// Tasks missing a terminal stage; excluded from medians.
    pub incomplete: usize,
    /// Stage-order or accounting violations, one line each.
    pub violations: Vec<String>,
}

/// Group events into per-task traces. Later duplicates of a stage keep the
/// first timestamp.
fn build_traces(events: &[EventRecord]) -> Vec<TaskTrace> {
    let mut by_task: BTreeMap<String, TaskTrace> = BTreeMap::new();
    for ev in events {
        let trace = by_task.entry(ev.task_id.clone()).or_insert_with(|| TaskTrace {
            task_id: ev.task_id.clone(),
            topic: ev.topic.clone(),
            stamps: HashMap::new(),
        });
        trace.stamps.entry(ev.stage).or_insert(ev.t_ns);
    }
    by_task.into_values().collect()
}

/// The main lifecycle chain (created through result_received) is totally
/// ordered. The post-delivery stages are only partially ordered: a
/// simulation-chaining decision is made *without* reading result data, so
/// decision_made may precede data_resolved; each must follow
/// result_received, and next_submitted follows decision_made.
fn validate_trace(trace: &TaskTrace, violations: &mut Vec<String>) {
    let mut last: Option<(Stage, u64)> = None;
    for stage in Stage::ALL {
        if matches!(
            stage,
            Stage::DataResolved | Stage::DecisionMade | Stage::NextSubmitted
        ) {
            continue;
        }
        let Some(t) = trace.get(stage) else { continue };
        if let Some((prev_stage, prev_t)) = last {
            if t < prev_t {
                violations.push(format!(
                    "task {}: stage {stage:?} at {t} precedes {prev_stage:?} at {prev_t}",
                    trace.task_id
                ));
            }
        }
        last = Some((stage, t));
    }
    let mut require_after = |earlier: Stage, later: Stage| {
        if let (Some(a), Some(b)) = (trace.get(earlier), trace.get(later)) {
            if b < a {
                violations.push(format!(
                    "task {}: stage {later:?} at {b} precedes {earlier:?} at {a}",
                    trace.task_id
                ));
            }
        }
    };
    require_after(Stage::ResultReceived, Stage::DataResolved);
    require_after(Stage::ResultReceived, Stage::DecisionMade);
    require_after(Stage::DecisionMade, Stage::NextSubmitted);
}

fn breakdown_for(trace: &TaskTrace) -> Option<LatencyBreakdown> {
    let lifetime = trace.span_ms(Stage::Created, Stage::ResultReceived)?;
    Some(LatencyBreakdown {
        task_id: trace.task_id.clone(),
        topic: trace.topic.clone(),
        serialization_ms: trace.span_ms(Stage::Created, Stage::Serialized),
        thinker_to_server_ms: trace.span_ms(Stage::Serialized, Stage::SentToServer),
        server_to_worker_ms: trace.span_ms(Stage::SentToRelay, Stage::StartedOnWorker),
        time_on_worker_ms: trace.span_ms(Stage::StartedOnWorker, Stage::ResultSerialized),
        worker_to_server_ms: trace.span_ms(Stage::ResultSerialized, Stage::ResultPosted),
        server_to_thinker_ms: trace.span_ms(Stage::ResultPosted, Stage::ResultReceived),
        task_lifetime_ms: lifetime,
    })
}

fn check_accounting(b: &LatencyBreakdown, violations: &mut Vec<String>) {
    let mut sum = 0.0;
    for name in LatencyBreakdown::COMPONENTS {
        if name == "task_lifetime_ms" {
            continue;
        }
        if let Some(v) = b.component(name) {
            if v < -1e-9 {
                violations.push(format!("task {}: component {name} negative ({v})", b.task_id));
            }
            sum += v.max(0.0);
        }
    }
    // Components are disjoint sub-spans of the lifetime; allow 1% slack
    // plus a hair of float noise.
    if sum > b.task_lifetime_ms * 1.01 + 1e-6 {
        violations.push(format!(
            "task {}: components sum {sum:.3} ms exceeds lifetime {:.3} ms + 1%",
            b.task_id, b.task_lifetime_ms
        ));
    }
}

fn steering_metrics(traces: &[TaskTrace]) -> SteeringMetrics {
    let mut m = SteeringMetrics::default();
    for t in traces {
        if t.topic == MARKER_TOPIC {
            if let Some(v) = t.span_ms(Stage::Created, Stage::DecisionMade) {
                m.ml_makespan_ms.push(v);
            }
            continue;
        }
        if let Some(v) = t.span_ms(Stage::FinishedOnWorker, Stage::ResultReceived) {
            m.reaction_notify_ms.push(v);
        }
        if let Some(v) = t.span_ms(Stage::ResultReceived, Stage::DataResolved) {
            m.reaction_data_ms.push(v);
        }
        if let Some(v) = t.span_ms(Stage::ResultReceived, Stage::DecisionMade) {
            m.decision_ms.push(v);
        }
    }

    // Dispatch spans join a predecessor's next_submitted with the successor
    // task created immediately after it on the same topic; decisions are
    // serialized under the steering state lock, so the first unmatched
    // created-at-or-after is the successor.
    let mut submissions: HashMap<&str, Vec<(u64, &TaskTrace)>> = HashMap::new();
    for t in traces {
        if t.topic == MARKER_TOPIC {
            continue;
        }
        if let Some(created) = t.get(Stage::Created) {
            submissions.entry(t.topic.as_str()).or_default().push((created, t));
        }
    }
    for list in submissions.values_mut() {
        list.sort_by_key(|(created, _)| *created);
    }
    let mut matched: HashMap<&str, usize> = HashMap::new();
    let mut decisions: Vec<(&str, u64)> = traces
        .iter()
        .filter(|t| t.topic != MARKER_TOPIC)
        .filter_map(|t| t.get(Stage::NextSubmitted).map(|at| (t.topic.as_str(), at)))
        .collect();
    decisions.sort_by_key(|(_, at)| *at);
    for (topic, at) in decisions {
        let Some(list) = submissions.get(topic) else { continue };
        let start = *matched.get(topic).unwrap_or(&0);
        if let Some(pos) = list[start..].iter().position(|(created, _)| *created >= at) {
            let (_, successor) = list[start + pos];
            matched.insert(topic, start + pos + 1);
            if let Some(started) = successor.get(Stage::StartedOnWorker) {
                m.dispatch_ms.push((started as f64 - at as f64) / 1e6);
            }
        }
    }
    m
}

/// Derive per-task breakdowns and per-run steering metrics from a merged
/// event list. Pure function of its input.
pub fn derive_breakdowns(events: &[EventRecord]) -> DerivedMetrics {
    let traces = build_traces(events);
    let mut out = DerivedMetrics::default();
    for trace in &traces {
        validate_trace(trace, &mut out.violations);
        if trace.topic == MARKER_TOPIC {
            continue;
        }
        match breakdown_for(trace) {
            Some(b) => {
                check_accounting(&b, &mut out.violations);
                out.breakdowns.push(b);
            }
            None => out.incomplete += 1,
        }
    }
    out.steering = steering_metrics(&traces);
    out.traces = traces;
    out
}

/// Interpolated percentile of a sample set; `p` in [0, 1].
pub fn percentile(values: &[f64], p: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    Some(sorted[lo] * (1.0 - frac) + sorted[hi] * frac)
}

/// Median with the 40th/60th-percentile band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub p40: f64,
    pub median: f64,
    pub p60: f64,
    pub count: usize,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Option<MetricSummary> {
        Some(MetricSummary {
            p40: percentile(values, 0.40)?,
            median: percentile(values, 0.50)?,
            p60: percentile(values, 0.60)?,
            count: values.len(),
        })
    }
}

/// Busy intervals per worker reconstructed greedily: tasks sorted by start
/// are assigned to the compatible slot that has been free the longest, the
/// same policy a real pool follows. Busy time runs from started_on_worker
/// to result_serialized.
fn assign_slots(traces: &[&TaskTrace], slots: usize) -> Vec<Vec<(u64, u64)>> {
    let mut intervals: Vec<(u64, u64)> = traces
        .iter()
        .filter_map(|t| {
            let start = t.get(Stage::StartedOnWorker)?;
            let end = t
                .get(Stage::ResultSerialized)
                .or_else(|| t.get(Stage::FinishedOnWorker))?;
            Some((start, end))
        })
        .collect();
    intervals.sort_unstable();
    let mut per_slot: Vec<Vec<(u64, u64)>> = vec![Vec::new(); slots.max(1)];
    for (start, end) in intervals {
        let slot = (0..per_slot.len())
            .filter(|&s| per_slot[s].last().map_or(true, |(_, e)| *e <= start))
            .min_by_key(|&s| per_slot[s].last().map_or(0, |(_, e)| *e))
            .unwrap_or_else(|| {
                // Overlap beyond the slot count (should not happen when the
                // slot bound holds); pile onto the earliest-free slot.
                (0..per_slot.len())
                    .min_by_key(|&s| per_slot[s].last().map_or(0, |(_, e)| *e))
                    .unwrap()
            });
        per_slot[slot].push((start, end));
    }
    per_slot
}

/// Idle gaps between consecutive tasks per reconstructed worker slot, in
/// milliseconds.
pub fn idle_gaps_ms(traces: &[&TaskTrace], slots: usize) -> Vec<f64> {
    let mut gaps = Vec::new();
    for slot in assign_slots(traces, slots) {
        for w in slot.windows(2) {
            let (_, prev_end) = w[0];
            let (next_start, _) = w[1];
            gaps.push((next_start.saturating_sub(prev_end)) as f64 / 1e6);
        }
    }
    gaps
}

/// busy / (slots x span): fraction of worker capacity spent on tasks
/// between the first task start and the last task end.
pub fn utilization(traces: &[&TaskTrace], slots: usize) -> Option<f64> {
    let mut busy = 0u64;
    let mut first = u64::MAX;
    let mut last = 0u64;
    let mut any = false;
    for t in traces {
        let Some(start) = t.get(Stage::StartedOnWorker) else { continue };
        let Some(end) = t
            .get(Stage::ResultSerialized)
            .or_else(|| t.get(Stage::FinishedOnWorker))
        else {
            continue;
        };
        busy += end.saturating_sub(start);
        first = first.min(start);
        last = last.max(end);
        any = true;
    }
    if !any || last <= first {
        return None;
    }
    Some(busy as f64 / ((last - first) as f64 * slots as f64))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ev(task: &str, stage: Stage, t_ms: u64) -> EventRecord {
        EventRecord {
            task_id: task.into(),
            topic: "noop".into(),
            stage,
            t_ns: t_ms * 1_000_000,
        }
    }

    #[test]
    fn hand_built_log_yields_exact_milliseconds() {
        let events = vec![
            ev("t1", Stage::Created, 0),
            ev("t1", Stage::Serialized, 3),
            ev("t1", Stage::SentToServer, 4),
            ev("t1", Stage::SentToRelay, 6),
            ev("t1", Stage::StartedOnWorker, 16),
            ev("t1", Stage::ResultSerialized, 36),
            ev("t1", Stage::ResultPosted, 38),
            ev("t1", Stage::ResultReceived, 40),
        ];
        let derived = derive_breakdowns(&events);
        assert!(derived.violations.is_empty(), "{:?}", derived.violations);
        let b = &derived.breakdowns[0];
        assert_eq!(b.serialization_ms, Some(3.0));
        assert_eq!(b.thinker_to_server_ms, Some(1.0));
        assert_eq!(b.server_to_worker_ms, Some(10.0));
        assert_eq!(b.time_on_worker_ms, Some(20.0));
        assert_eq!(b.worker_to_server_ms, Some(2.0));
        assert_eq!(b.server_to_thinker_ms, Some(2.0));
        assert_eq!(b.task_lifetime_ms, 40.0);
    }

    #[test]
    fn out_of_order_stages_are_flagged_not_dropped() {
        let events = vec![
            ev("t1", Stage::Created, 10),
            ev("t1", Stage::Serialized, 5),
            ev("t1", Stage::ResultReceived, 20),
        ];
        let derived = derive_breakdowns(&events);
        // Both the stage-order check and the negative-component check fire.
        assert_eq!(derived.violations.len(), 2);
        assert!(derived.violations.iter().any(|v| v.contains("precedes")));
        assert!(derived.violations.iter().any(|v| v.contains("negative")));
    }

    #[test]
    fn incomplete_tasks_are_counted_and_excluded() {
        let events = vec![
            ev("t1", Stage::Created, 0),
            ev("t2", Stage::Created, 0),
            ev("t2", Stage::ResultReceived, 5),
        ];
        let derived = derive_breakdowns(&events);
        assert_eq!(derived.incomplete, 1);
        assert_eq!(derived.breakdowns.len(), 1);
    }

    #[test]
    fn seeded_constant_log_medians_equal_constants() {
        // Fixture generator: 21 tasks with identical 7 ms lifetime spans.
        let mut events = Vec::new();
        for i in 0..21 {
            let base = i * 100;
            let t = format!("t{i}");
            events.push(ev(&t, Stage::Created, base));
            events.push(ev(&t, Stage::Serialized, base + 2));
            events.push(ev(&t, Stage::ResultReceived, base + 7));
        }
        let derived = derive_breakdowns(&events);
        let ser: Vec<f64> = derived
            .breakdowns
            .iter()
            .filter_map(|b| b.serialization_ms)
            .collect();
        let s = MetricSummary::of(&ser).unwrap();
        assert_eq!(s.median, 2.0);
        assert_eq!(s.p40, 2.0);
        assert_eq!(s.p60, 2.0);
    }

    #[test]
    fn percentile_interpolates() {
        let values = vec![1.0, 2.0, 3.0, 4.0];
        assert_eq!(percentile(&values, 0.0), Some(1.0));
        assert_eq!(percentile(&values, 1.0), Some(4.0));
        assert_eq!(percentile(&values, 0.5), Some(2.5));
        assert_eq!(percentile(&[], 0.5), None);
    }

    #[test]
    fn utilization_matches_hand_computation() {
        // Two workers, span 100 ms: worker A busy [0,50] and [60,100],
        // worker B busy [0,100]. busy = 190 of 200 slot-ms -> 0.95.
        let mk = |id: &str, s: u64, e: u64| {
            let mut t = TaskTrace {
                task_id: id.into(),
                topic: "simulate".into(),
                stamps: HashMap::new(),
            };
            t.stamps.insert(Stage::StartedOnWorker, s * 1_000_000);
            t.stamps.insert(Stage::ResultSerialized, e * 1_000_000);
            t
        };
        let traces = vec![mk("a1", 0, 50), mk("a2", 60, 100), mk("b1", 0, 100)];
        let refs: Vec<&TaskTrace> = traces.iter().collect();
        let u = utilization(&refs, 2).unwrap();
        assert!((u - 0.95).abs() < 1e-9, "utilization {u}");
        let gaps = idle_gaps_ms(&refs, 2);
        assert_eq!(gaps, vec![10.0]);
    }

    #[test]
    fn dispatch_joins_predecessor_to_next_created() {
        let mut events = vec![
            ev("t1", Stage::Created, 0),
            ev("t1", Stage::ResultReceived, 10),
            ev("t1", Stage::DecisionMade, 11),
            ev("t1", Stage::NextSubmitted, 12),
            ev("t2", Stage::Created, 13),
            ev("t2", Stage::StartedOnWorker, 20),
        ];
        events.push(ev("t2", Stage::ResultReceived, 30));
        let derived = derive_breakdowns(&events);
        assert_eq!(derived.steering.decision_ms, vec![1.0]);
        assert_eq!(derived.steering.dispatch_ms, vec![8.0]);
    }
}
