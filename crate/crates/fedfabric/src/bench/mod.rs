//! Telemetry and latency metrics.
//!
//! Every process appends [`EventRecord`]s to its own JSONL log; analysis
//! merges the logs (applying per-role clock-offset corrections measured at
//! pairing) and derives per-task component spans and per-run steering
//! metrics, reported as medians with 40th/60th-percentile bands.
//!
//! Component spans are disjoint by construction:
//!
//! * serialization: `created -> serialized` (includes proxying time)
//! * thinker to server: `serialized -> sent_to_server`
//! * server to worker: `sent_to_relay -> started_on_worker`
//! * time on worker: `started_on_worker -> result_serialized`
//! * worker to server: `result_serialized -> result_posted`
//! * server to thinker: `result_posted -> result_received`
//!
//! The short task-server processing gap (`sent_to_server -> sent_to_relay`)
//! is intentionally uncounted, which is why component sums fall at or below
//! the task lifetime.

mod analyze;
mod log;
mod report;
pub mod scenario;

pub use analyze::{
    derive_breakdowns, idle_gaps_ms, percentile, utilization, DerivedMetrics, MetricSummary,
    TaskTrace,
};
pub use log::{load_event_dir, read_events, ClockOffsets, EventLog};
pub use report::{
    emit_report, parse_summary_csv, render_summary_csv, summarize, AssertionResult, ReportRow,
};

use serde::{Deserialize, Serialize};

/// Lifecycle stages, in canonical order. Per task, stage timestamps must be
/// non-decreasing in this order; stages may be absent where a topic does
/// not pass through them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Created,
    Serialized,
    SentToServer,
    SentToRelay,
    FetchedByEndpoint,
    StartedOnWorker,
    InputsResolved,
    FinishedOnWorker,
    ResultSerialized,
    ResultPosted,
    ResultReceived,
    DataResolved,
    DecisionMade,
    NextSubmitted,
}

impl Stage {
    pub const ALL: [Stage; 14] = [
        Stage::Created,
        Stage::Serialized,
        Stage::SentToServer,
        Stage::SentToRelay,
        Stage::FetchedByEndpoint,
        Stage::StartedOnWorker,
        Stage::InputsResolved,
        Stage::FinishedOnWorker,
        Stage::ResultSerialized,
        Stage::ResultPosted,
        Stage::ResultReceived,
        Stage::DataResolved,
        Stage::DecisionMade,
        Stage::NextSubmitted,
    ];

    pub fn order(self) -> usize {
        Self::ALL.iter().position(|s| *s == self).unwrap()
    }
}

/// One timestamped lifecycle event, exactly the JSONL line schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventRecord {
    pub task_id: String,
    pub topic: String,
    pub stage: Stage,
    pub t_ns: u64,
}

/// Synthetic topic used by run-level markers (retrain rounds); excluded
/// from per-task breakdowns.
pub const MARKER_TOPIC: &str = "ml-round";

/// Disjoint component spans of one task, in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub task_id: String,
    pub topic: String,
    pub serialization_ms: Option<f64>,
    pub thinker_to_server_ms: Option<f64>,
    pub server_to_worker_ms: Option<f64>,
    pub time_on_worker_ms: Option<f64>,
    pub worker_to_server_ms: Option<f64>,
    pub server_to_thinker_ms: Option<f64>,
    pub task_lifetime_ms: f64,
}

impl LatencyBreakdown {
    pub fn component(&self, name: &str) -> Option<f64> {
        match name {
            "serialization_ms" => self.serialization_ms,
            "thinker_to_server_ms" => self.thinker_to_server_ms,
            "server_to_worker_ms" => self.server_to_worker_ms,
            "time_on_worker_ms" => self.time_on_worker_ms,
            "worker_to_server_ms" => self.worker_to_server_ms,
            "server_to_thinker_ms" => self.server_to_thinker_ms,
            "task_lifetime_ms" => Some(self.task_lifetime_ms),
            _ => None,
        }
    }

    pub const COMPONENTS: [&'static str; 7] = [
        "serialization_ms",
        "thinker_to_server_ms",
        "server_to_worker_ms",
        "time_on_worker_ms",
        "worker_to_server_ms",
        "server_to_thinker_ms",
        "task_lifetime_ms",
    ];
}

/// Per-run steering latencies, each a list of samples in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SteeringMetrics {
    /// finished_on_worker -> result_received
    pub reaction_notify_ms: Vec<f64>,
    /// result_received -> data_resolved
    pub reaction_data_ms: Vec<f64>,
    /// result_received -> decision_made
    pub decision_ms: Vec<f64>,
    /// next_submitted (predecessor) -> started_on_worker (successor)
    pub dispatch_ms: Vec<f64>,
    /// retrain requested -> queue reprioritized, from run markers
    pub ml_makespan_ms: Vec<f64>,
}
