//! Cloud-relay stand-in.
//!
//! The relay registers functions, accepts endpoint-targeted submissions,
//! tiers payload storage by size, enforces the payload cap, and
//! stores-and-forwards tasks and results across disconnects. Endpoints and
//! clients always dial the relay; the relay holds no endpoint addresses and
//! never dials out.

mod client;
mod protocol;
mod server;

pub use client::RelayClient;
pub use protocol::{MessageType, Status, FRAME_LIMIT};
pub use server::{RelayServer, RelayStatsSnapshot};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refcore::TaskPayload;
use crate::stores::NetworkModel;
use crate::wire::{self, KvMap, Reader, WireError};

/// Payloads strictly smaller than this go to the fast tier.
pub const FAST_TIER_THRESHOLD_BYTES: u64 = 20_000;
/// Serialized payloads larger than this are rejected outright.
pub const MAX_PAYLOAD_BYTES: u64 = 10_000_000;
/// Default lease before an unacknowledged in-flight task is redelivered.
pub const DEFAULT_LEASE_TIMEOUT_MS: u64 = 60_000;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct TaskId(pub String);

impl TaskId {
    pub fn generate() -> Self {
        TaskId(format!("{:032x}", rand::thread_rng().gen::<u128>()))
    }
}

impl std::fmt::Display for TaskId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct FunctionId(pub String);

impl std::fmt::Display for FunctionId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EndpointId(pub String);

impl std::fmt::Display for EndpointId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for EndpointId {
    fn from(s: &str) -> Self {
        EndpointId(s.to_owned())
    }
}

/// A registered function: a named builtin task implementation plus an
/// opaque parameter block. Bodies are immutable after registration;
/// re-registering the same name+body yields the same id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FunctionRecord {
    pub function_id: FunctionId,
    pub name: String,
    pub builtin: String,
    pub params: Vec<u8>,
}

/// Storage class for one payload, split at the fast-tier threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Tier {
    Fast,
    Blob,
}

impl Tier {
    pub fn as_str(self) -> &'static str {
        match self {
            Tier::Fast => "fast",
            Tier::Blob => "blob",
        }
    }

    pub fn parse(s: &str) -> Option<Tier> {
        match s {
            "fast" => Some(Tier::Fast),
            "blob" => Some(Tier::Blob),
            _ => None,
        }
    }
}

/// Tier thresholds plus the latency models of the two storage classes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TierPolicy {
    #[serde(default = "TierPolicy::default_fast_threshold")]
    pub fast_threshold_bytes: u64,
    #[serde(default = "TierPolicy::default_max_payload")]
    pub max_payload_bytes: u64,
    pub fast_tier: NetworkModel,
    pub blob_tier: NetworkModel,
}

impl Default for TierPolicy {
    fn default() -> Self {
        TierPolicy {
            fast_threshold_bytes: Self::default_fast_threshold(),
            max_payload_bytes: Self::default_max_payload(),
            fast_tier: NetworkModel {
                request_latency_ms: 5.0,
                bandwidth_bytes_per_s: 200e6,
                ..Default::default()
            },
            blob_tier: NetworkModel {
                request_latency_ms: 25.0,
                bandwidth_bytes_per_s: 20e6,
                ..Default::default()
            },
        }
    }
}

impl TierPolicy {
    fn default_fast_threshold() -> u64 {
        FAST_TIER_THRESHOLD_BYTES
    }

    fn default_max_payload() -> u64 {
        MAX_PAYLOAD_BYTES
    }

    /// Fast iff strictly smaller than the threshold; at the threshold and
    /// above is blob tier.
    pub fn tier_for(&self, payload_len: u64) -> Tier {
        if payload_len < self.fast_threshold_bytes {
            Tier::Fast
        } else {
            Tier::Blob
        }
    }

    pub fn accepts(&self, payload_len: u64) -> bool {
        payload_len <= self.max_payload_bytes
    }

    /// Simulated cost of one read or write of `len` bytes in a tier.
    pub fn tier_latency_ms(&self, tier: Tier, len: u64) -> f64 {
        let model = match tier {
            Tier::Fast => &self.fast_tier,
            Tier::Blob => &self.blob_tier,
        };
        model.op_latency_ns(len) as f64 / 1e6
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.fast_threshold_bytes >= self.max_payload_bytes {
            return Err("fast threshold must be below the payload cap".into());
        }
        if self.blob_tier.request_latency_ms < self.fast_tier.request_latency_ms {
            return Err("blob tier per-operation latency must be >= fast tier's".into());
        }
        self.fast_tier.validate()?;
        self.blob_tier.validate()
    }
}

/// The wire unit routed from clients through the relay to endpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskDescriptor {
    pub task_id: TaskId,
    pub function_id: FunctionId,
    pub endpoint_id: EndpointId,
    pub topic: String,
    pub payload: TaskPayload,
    pub created_ns: u64,
    pub tier: Option<Tier>,
}

impl TaskDescriptor {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        let tier = self.tier.map(Tier::as_str).unwrap_or("");
        let created = self.created_ns.to_string();
        wire::put_kv_pairs(
            &mut buf,
            [
                ("task_id", self.task_id.0.as_str()),
                ("function_id", self.function_id.0.as_str()),
                ("endpoint_id", self.endpoint_id.0.as_str()),
                ("topic", self.topic.as_str()),
                ("created_ns", created.as_str()),
                ("tier", tier),
            ],
        );
        wire::put_blob(&mut buf, &self.payload.encode());
        buf
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let kv = KvMap::new(r.kv_pairs()?);
        let payload = TaskPayload::decode(r.blob()?)?;
        Ok(TaskDescriptor {
            task_id: TaskId(kv.require("task_id")?.to_owned()),
            function_id: FunctionId(kv.require("function_id")?.to_owned()),
            endpoint_id: EndpointId(kv.require("endpoint_id")?.to_owned()),
            topic: kv.require("topic")?.to_owned(),
            created_ns: kv.require_u64("created_ns")?,
            tier: kv.get("tier").and_then(Tier::parse),
            payload,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResultStatus {
    Success,
    TaskError,
    InfraError,
}

impl ResultStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            ResultStatus::Success => "success",
            ResultStatus::TaskError => "task-error",
            ResultStatus::InfraError => "infra-error",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "success" => Some(ResultStatus::Success),
            "task-error" => Some(ResultStatus::TaskError),
            "infra-error" => Some(ResultStatus::InfraError),
            _ => None,
        }
    }
}

/// Per-phase worker timings, in nanoseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WorkerTimings {
    pub deserialize_ns: u64,
    pub resolve_ns: u64,
    pub execute_ns: u64,
    pub serialize_ns: u64,
    pub time_on_worker_ns: u64,
}

impl WorkerTimings {
    pub fn deserialize_ms(&self) -> f64 {
        self.deserialize_ns as f64 / 1e6
    }

    pub fn resolve_ms(&self) -> f64 {
        self.resolve_ns as f64 / 1e6
    }

    pub fn execute_ms(&self) -> f64 {
        self.execute_ns as f64 / 1e6
    }

    pub fn serialize_ms(&self) -> f64 {
        self.serialize_ns as f64 / 1e6
    }

    pub fn time_on_worker_ms(&self) -> f64 {
        self.time_on_worker_ns as f64 / 1e6
    }

    pub fn phase_sum_ns(&self) -> u64 {
        self.deserialize_ns + self.resolve_ns + self.execute_ns + self.serialize_ns
    }
}

/// The wire unit carrying one task's outcome back through the relay.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultEnvelope {
    pub task_id: TaskId,
    pub status: ResultStatus,
    pub message: Option<String>,
    pub payload: TaskPayload,
    pub timings: WorkerTimings,
    pub worker_id: String,
}

impl ResultEnvelope {
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        let t = &self.timings;
        let nums: Vec<String> = [
            t.deserialize_ns,
            t.resolve_ns,
            t.execute_ns,
            t.serialize_ns,
            t.time_on_worker_ns,
        ]
        .iter()
        .map(|v| v.to_string())
        .collect();
        wire::put_kv_pairs(
            &mut buf,
            [
                ("task_id", self.task_id.0.as_str()),
                ("status", self.status.as_str()),
                ("message", self.message.as_deref().unwrap_or("")),
                ("worker_id", self.worker_id.as_str()),
                ("deserialize_ns", nums[0].as_str()),
                ("resolve_ns", nums[1].as_str()),
                ("execute_ns", nums[2].as_str()),
                ("serialize_ns", nums[3].as_str()),
                ("time_on_worker_ns", nums[4].as_str()),
            ],
        );
        wire::put_blob(&mut buf, &self.payload.encode());
        buf
    }

    pub fn decode(buf: &[u8]) -> Result<Self, WireError> {
        let mut r = Reader::new(buf);
        let kv = KvMap::new(r.kv_pairs()?);
        let payload = TaskPayload::decode(r.blob()?)?;
        let status = ResultStatus::parse(kv.require("status")?).ok_or(WireError::Malformed {
            field: "status",
            detail: "unknown result status".into(),
        })?;
        let message = match kv.require("message")? {
            "" => None,
            m => Some(m.to_owned()),
        };
        Ok(ResultEnvelope {
            task_id: TaskId(kv.require("task_id")?.to_owned()),
            status,
            message,
            worker_id: kv.require("worker_id")?.to_owned(),
            timings: WorkerTimings {
                deserialize_ns: kv.require_u64("deserialize_ns")?,
                resolve_ns: kv.require_u64("resolve_ns")?,
                execute_ns: kv.require_u64("execute_ns")?,
                serialize_ns: kv.require_u64("serialize_ns")?,
                time_on_worker_ns: kv.require_u64("time_on_worker_ns")?,
            },
            payload,
        })
    }
}

#[derive(Debug, Clone, Error)]
pub enum RelayError {
    #[error("relay unreachable: {0}")]
    Unreachable(String),
    #[error("unknown function {0}")]
    UnknownFunction(String),
    #[error("payload of {len} bytes exceeds the {max}-byte cap")]
    PayloadTooLarge { len: u64, max: u64 },
    #[error("authentication failed for endpoint {0}")]
    Auth(String),
    #[error("unknown task {0}")]
    UnknownTask(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error(transparent)]
    Wire(#[from] WireError),
}

impl RelayError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, RelayError::Unreachable(_))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn payload() -> TaskPayload {
        let mut p = TaskPayload::new();
        p.push_inline("input", vec![3u8; 64]).unwrap();
        p.set_meta("seed", "9");
        p
    }

    #[test]
    fn descriptor_roundtrip() {
        let d = TaskDescriptor {
            task_id: TaskId("t1".into()),
            function_id: FunctionId("f1".into()),
            endpoint_id: "ep-cpu".into(),
            topic: "simulate".into(),
            payload: payload(),
            created_ns: 12345,
            tier: Some(Tier::Fast),
        };
        let back = TaskDescriptor::decode(&d.encode()).unwrap();
        assert_eq!(back, d);
    }

    #[test]
    fn envelope_roundtrip() {
        let e = ResultEnvelope {
            task_id: TaskId("t1".into()),
            status: ResultStatus::TaskError,
            message: Some("boom".into()),
            payload: payload(),
            timings: WorkerTimings {
                deserialize_ns: 1,
                resolve_ns: 2,
                execute_ns: 3,
                serialize_ns: 4,
                time_on_worker_ns: 11,
            },
            worker_id: "ep-cpu/3".into(),
        };
        let back = ResultEnvelope::decode(&e.encode()).unwrap();
        assert_eq!(back, e);
    }

    #[test]
    fn tiering_boundaries_are_exact() {
        let p = TierPolicy::default();
        assert_eq!(p.tier_for(19_999), Tier::Fast);
        assert_eq!(p.tier_for(20_000), Tier::Blob);
        assert!(p.accepts(10_000_000));
        assert!(!p.accepts(10_000_001));
    }
}
