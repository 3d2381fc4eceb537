//! Site-resident endpoint runtime.
//!
//! An endpoint outbound-connects to the relay (the relay never dials it),
//! pairs for a token, provisions an in-process worker pool, restores
//! proxied inputs, invokes registered task implementations, and posts
//! proxied results back. On relay disconnects it retries with exponential
//! backoff; on shutdown it drains in-flight tasks before exiting.

mod executor;
mod runner;

pub use executor::{execute_task, ExecEnv};
pub use runner::{run_endpoint, EndpointHandle, EndpointReport};

use std::collections::BTreeSet;
use std::time::Duration;

use thiserror::Error;

use crate::config::{ConfigError, ResourceKind, RunConfig};
use crate::refcore::ProxyPolicy;
use crate::relay::EndpointId;
use crate::stores::StoreConfig;

#[derive(Debug, Error)]
pub enum EndpointError {
    #[error("endpoint auth failed: {0}")]
    Auth(String),
    #[error("endpoint {id} is not in the run config")]
    UnknownEndpoint { id: String },
    #[error("store {0} failed to open: {1}")]
    StoreOpen(String, String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o: {0}")]
    Io(String),
}

/// Everything one endpoint process needs: identity, pool size, reachable
/// stores, and the result-side proxy policy.
#[derive(Debug, Clone)]
pub struct EndpointSpec {
    pub endpoint_id: EndpointId,
    pub site_name: String,
    pub resource_kind: ResourceKind,
    pub worker_slots: usize,
    pub store_bindings: Vec<StoreConfig>,
    pub shared_fs_sites: BTreeSet<String>,
    pub drain_timeout: Duration,
    pub proxy_policy: ProxyPolicy,
    pub cache_capacity_bytes: u64,
    pub relay_addr: String,
}

impl EndpointSpec {
    pub fn from_config(cfg: &RunConfig, endpoint_id: &str) -> Result<EndpointSpec, EndpointError> {
        let section = cfg
            .endpoint(endpoint_id)
            .ok_or_else(|| EndpointError::UnknownEndpoint {
                id: endpoint_id.to_owned(),
            })?;
        let store_bindings = section
            .stores
            .iter()
            .filter_map(|id| cfg.store(id).cloned())
            .collect();
        Ok(EndpointSpec {
            endpoint_id: EndpointId(section.id.clone()),
            site_name: section.site.clone(),
            resource_kind: section.resource_kind,
            worker_slots: section.worker_slots,
            store_bindings,
            shared_fs_sites: cfg.shared_fs_sites(&section.site).into_iter().collect(),
            drain_timeout: Duration::from_millis(section.drain_timeout_ms),
            proxy_policy: cfg.proxy_policy()?,
            cache_capacity_bytes: cfg.run.cache_capacity_bytes,
            relay_addr: cfg.relay.listen.clone(),
        })
    }
}
