//! A desk-scale, multi-process federated task-execution fabric.
//!
//! The crate wires together five cooperating pieces:
//!
//! * [`refcore`] — pass-by-reference payloads: large byte fields are replaced
//!   by small [`refcore::Reference`] tokens that resolve lazily through a
//!   per-site cache.
//! * [`stores`] — pluggable object-store backends (networked memory KV,
//!   shared filesystem, simulated wide-area transfer), each shaped by a
//!   [`stores::NetworkModel`] so a single host reproduces multi-site timing.
//! * [`relay`] — the cloud-service stand-in: function registry, endpoint-
//!   targeted task submission with tiered payload storage, and
//!   store-and-forward queues that survive endpoint disconnects.
//! * [`endpoint`] — site-resident worker pools that outbound-connect to the
//!   relay, restore proxied inputs, run registered task implementations, and
//!   post proxied results.
//! * [`steering`] + [`apps`] — an agent-based Thinker that drives two
//!   synthetic active-learning applications through the fabric.
//!
//! [`bench`] collects per-stage event records from every process and derives
//! the latency breakdowns and scenario assertions; the `fedfabric` binary
//! exposes the long-running roles and the scenario runner.
//!
//! Most capabilities have a runnable demo under `examples/`.

pub mod apps;
pub mod bench;
pub mod clock;
pub mod config;
pub mod endpoint;
pub mod refcore;
pub mod relay;
pub mod steering;
pub mod stores;
pub mod wire;

pub mod cli;
