//! Synthetic active-learning applications.
//!
//! Two drivers exercise the fabric with the task graphs of the reference
//! workloads: a UCB-steered search over a fixed candidate pool
//! ([`moldesign`]) and surrogate fine-tuning with sampling, audit, and
//! uncertainty pools ([`finetune`]). The science is replaced by a seeded
//! synthetic objective with known ground truth, so search efficacy is
//! measured exactly rather than estimated.

pub mod finetune;
pub mod moldesign;
pub mod noop_bench;
pub mod objective;
pub mod sampling;
pub mod surrogate;
pub mod tasks;

use serde::{Deserialize, Serialize};

use crate::config::ResourceKind;

/// One pool member: an id, a feature vector, and optional padding recorded
/// separately when payload sizes matter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: u64,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    Seed,
    Audit,
    Uncertainty,
    Search,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledExample {
    pub candidate_id: u64,
    pub features: Vec<f64>,
    pub label: f64,
    pub provenance: Provenance,
}

/// Resource demanded by a builtin task implementation, if it cares.
/// Training and inference model GPU-bound work; simulation and sampling are
/// CPU-bound. `noop` runs anywhere.
pub fn builtin_resource_kind(builtin: &str) -> Option<ResourceKind> {
    match builtin {
        "train" | "infer" => Some(ResourceKind::Gpu),
        "simulate" | "sample" => Some(ResourceKind::Cpu),
        _ => None,
    }
}
