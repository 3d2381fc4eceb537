//! Agent-based workflow steering.
//!
//! A Thinker is a set of event-driven agents sharing state behind a single
//! lock. Agents submit topic-tagged tasks through an in-process task-server
//! channel (which proxies large inputs per topic and talks to the relay)
//! and receive completed results on per-topic queues.

mod queue;
mod thinker;

pub use queue::PrioritizedTaskQueue;
pub use thinker::{
    run_thinker, Agent, AgentCx, AgentEvent, AgentFlow, ThinkerDeps, TopicResult, TopicRoute,
};

use thiserror::Error;

use crate::config::{PolicySection, ResourceKind, RetrainTriggerCfg};

#[derive(Debug, Error)]
pub enum SteeringError {
    #[error("unknown topic {0}")]
    UnknownTopic(String),
    #[error("relay: {0}")]
    Relay(#[from] crate::relay::RelayError),
    #[error("proxy: {0}")]
    Proxy(#[from] crate::refcore::ProxyError),
    #[error("agent {agent}: {detail}")]
    Agent { agent: String, detail: String },
    #[error("steering runtime: {0}")]
    Runtime(String),
}

/// What wakes an agent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Trigger {
    OnStart,
    OnResult(String),
    OnResourceFree(ResourceKind),
    OnTimer(std::time::Duration),
}

/// When the training gate opens, relative to results accumulated since the
/// last training round.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RetrainTrigger {
    /// Train on any new data.
    Continuous,
    /// Train once `n` new results accumulated; keep refilling simulations.
    EveryN(u64),
    /// Train once `n` accumulated and pause simulation refills while
    /// training runs.
    BatchPause(u64),
}

impl RetrainTrigger {
    pub fn from_config(cfg: &RetrainTriggerCfg) -> Result<Self, String> {
        match cfg.kind.as_str() {
            "continuous" => Ok(RetrainTrigger::Continuous),
            "every-n" => Ok(RetrainTrigger::EveryN(cfg.n)),
            "batch-pause" => Ok(RetrainTrigger::BatchPause(cfg.n)),
            other => Err(format!("unknown retrain trigger {other:?}")),
        }
    }

    /// True when refills should stop while a training round is in flight.
    pub fn pauses_refill(&self) -> bool {
        matches!(self, RetrainTrigger::BatchPause(_))
    }
}

/// Pure gate: should a new training round start now?
pub fn retrain_gate(trigger: RetrainTrigger, new_results_since_last_train: u64) -> bool {
    match trigger {
        RetrainTrigger::Continuous => new_results_since_last_train >= 1,
        RetrainTrigger::EveryN(n) | RetrainTrigger::BatchPause(n) => {
            new_results_since_last_train >= n
        }
    }
}

/// The steering knobs: retrain trigger, simulation backlog depth, inference
/// batching, ensemble size.
#[derive(Debug, Clone, PartialEq)]
pub struct SteeringPolicy {
    pub retrain_trigger: RetrainTrigger,
    pub simulation_backlog_k: usize,
    pub inference_chunk_size: usize,
    pub ensemble_size: usize,
}

impl SteeringPolicy {
    pub fn from_config(cfg: &PolicySection) -> Result<Self, String> {
        Ok(SteeringPolicy {
            retrain_trigger: RetrainTrigger::from_config(&cfg.retrain_trigger)?,
            simulation_backlog_k: cfg.simulation_backlog_k,
            inference_chunk_size: cfg.inference_chunk_size.max(1),
            ensemble_size: cfg.ensemble_size.max(1),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gate_semantics() {
        assert!(retrain_gate(RetrainTrigger::Continuous, 1));
        assert!(!retrain_gate(RetrainTrigger::Continuous, 0));
        assert!(!retrain_gate(RetrainTrigger::EveryN(25), 24));
        assert!(retrain_gate(RetrainTrigger::EveryN(25), 25));
        assert!(retrain_gate(RetrainTrigger::BatchPause(25), 26));
        assert!(RetrainTrigger::BatchPause(25).pauses_refill());
        assert!(!RetrainTrigger::EveryN(25).pauses_refill());
    }
}
