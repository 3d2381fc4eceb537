//! Run configuration: one TOML file describes the whole deployment —
//! sites, stores, endpoints, topics, steering policy, scales, and seeds —
//! and every role (`relay`, `store`, `endpoint`, `thinker`) reads the same
//! file.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::refcore::{ProxyPolicy, StoreId, Threshold, TopicRule};
use crate::relay::TierPolicy;
use crate::stores::StoreConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {detail}")]
    Io { path: String, detail: String },
    #[error("parsing {path}: {detail}")]
    Parse { path: String, detail: String },
    #[error("invalid configuration:\n{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunSection {
    #[serde(default)]
    pub seed: u64,
    /// Multiplier applied to simulated task durations (1/30 turns the
    /// reference 60 s simulation into 2 s).
    #[serde(default = "RunSection::default_time_scale")]
    pub time_scale: f64,
    /// Multiplier applied to synthetic payload sizes.
    #[serde(default = "RunSection::default_data_scale")]
    pub data_scale: f64,
    /// Per-site resolve cache capacity.
    #[serde(default = "RunSection::default_cache_capacity")]
    pub cache_capacity_bytes: u64,
}

impl RunSection {
    fn default_time_scale() -> f64 {
        1.0 / 30.0
    }

    fn default_data_scale() -> f64 {
        0.01
    }

    fn default_cache_capacity() -> u64 {
        1 << 30
    }
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            seed: 0,
            time_scale: Self::default_time_scale(),
            data_scale: Self::default_data_scale(),
            cache_capacity_bytes: Self::default_cache_capacity(),
        }
    }
}

/// Relay address and behavior. Deliberately contains no endpoint
/// addresses: the relay never dials out.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RelaySection {
    pub listen: String,
    #[serde(default = "RelaySection::default_lease_timeout")]
    pub lease_timeout_ms: u64,
    #[serde(default)]
    pub tiers: TierPolicy,
}

impl RelaySection {
    fn default_lease_timeout() -> u64 {
        crate::relay::DEFAULT_LEASE_TIMEOUT_MS
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SiteSection {
    pub name: String,
    #[serde(default)]
    pub shared_fs_with: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ResourceKind {
    Cpu,
    Gpu,
}

impl ResourceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ResourceKind::Cpu => "cpu",
            ResourceKind::Gpu => "gpu",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EndpointSection {
    pub id: String,
    pub site: String,
    pub resource_kind: ResourceKind,
    pub worker_slots: usize,
    /// Ids of stores reachable from this site.
    #[serde(default)]
    pub stores: Vec<String>,
    #[serde(default = "EndpointSection::default_drain_timeout")]
    pub drain_timeout_ms: u64,
}

impl EndpointSection {
    fn default_drain_timeout() -> u64 {
        30_000
    }
}

/// Threshold as written in TOML: a byte count or the string "disabled".
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(untagged)]
pub enum ThresholdCfg {
    Bytes(u64),
    Named(String),
}

impl ThresholdCfg {
    pub fn to_threshold(&self) -> Result<Threshold, String> {
        match self {
            ThresholdCfg::Bytes(b) => Ok(Threshold::Bytes(*b)),
            ThresholdCfg::Named(s) if s == "disabled" => Ok(Threshold::Disabled),
            ThresholdCfg::Named(s) => Err(format!("unknown threshold {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopicSection {
    pub name: String,
    /// Registered function invoked for this topic.
    pub function: String,
    /// Endpoint this topic routes to.
    pub endpoint: String,
    pub proxy_threshold: ThresholdCfg,
    #[serde(default)]
    pub proxy_store: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RetrainTriggerCfg {
    /// One of `continuous`, `every-n`, `batch-pause`.
    pub kind: String,
    #[serde(default = "RetrainTriggerCfg::default_n")]
    pub n: u64,
}

impl RetrainTriggerCfg {
    fn default_n() -> u64 {
        25
    }
}

impl Default for RetrainTriggerCfg {
    fn default() -> Self {
        RetrainTriggerCfg {
            kind: "every-n".into(),
            n: 25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PolicySection {
    #[serde(default)]
    pub retrain_trigger: RetrainTriggerCfg,
    #[serde(default = "PolicySection::default_backlog")]
    pub simulation_backlog_k: usize,
    #[serde(default = "PolicySection::default_chunk")]
    pub inference_chunk_size: usize,
    #[serde(default = "PolicySection::default_ensemble")]
    pub ensemble_size: usize,
}

impl PolicySection {
    fn default_backlog() -> usize {
        1
    }

    fn default_chunk() -> usize {
        250
    }

    fn default_ensemble() -> usize {
        8
    }
}

impl Default for PolicySection {
    fn default() -> Self {
        PolicySection {
            retrain_trigger: RetrainTriggerCfg::default(),
            simulation_backlog_k: Self::default_backlog(),
            inference_chunk_size: Self::default_chunk(),
            ensemble_size: Self::default_ensemble(),
        }
    }
}

/// Application driver parameters. One table covers all drivers; each reads
/// the fields it needs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppSection {
    /// One of `noop-bench`, `moldesign`, `finetune`.
    pub kind: String,
    #[serde(default = "AppSection::default_pool")]
    pub pool_size: usize,
    #[serde(default = "AppSection::default_dim")]
    pub feature_dim: usize,
    #[serde(default)]
    pub sigma: f64,
    /// Steering mode for moldesign: `ucb` or `random`.
    #[serde(default = "AppSection::default_selection")]
    pub selection: String,
    /// Node-scaled-seconds of simulation compute before the run stops.
    #[serde(default = "AppSection::default_budget")]
    pub budget_node_seconds: f64,
    /// Reference (unscaled) task durations in seconds.
    #[serde(default = "AppSection::default_sim_s")]
    pub simulate_duration_s: f64,
    #[serde(default = "AppSection::default_train_s")]
    pub train_duration_s: f64,
    #[serde(default = "AppSection::default_infer_s")]
    pub infer_full_pool_s: f64,
    #[serde(default = "AppSection::default_sample_s")]
    pub sample_duration_s: f64,
    /// Reference (unscaled) payload paddings in bytes.
    #[serde(default = "AppSection::default_sim_out")]
    pub simulate_output_bytes: u64,
    #[serde(default = "AppSection::default_train_out")]
    pub train_output_bytes: u64,
    #[serde(default = "AppSection::default_infer_roundtrip")]
    pub infer_roundtrip_bytes: u64,
    #[serde(default = "AppSection::default_sample_out")]
    pub sample_output_bytes: u64,
    /// Fine-tuning knobs.
    #[serde(default = "AppSection::default_seed_examples")]
    pub seed_examples: usize,
    #[serde(default = "AppSection::default_new_structures")]
    pub new_structures_budget: usize,
    #[serde(default = "AppSection::default_audit_target")]
    pub audit_pool_target: usize,
    #[serde(default = "AppSection::default_uncertainty_cap")]
    pub uncertainty_pool_cap: usize,
    /// noop-bench knobs.
    #[serde(default = "AppSection::default_noop_tasks")]
    pub tasks_per_cell: usize,
    #[serde(default)]
    pub noop_input_bytes: Vec<u64>,
}

impl AppSection {
    fn default_pool() -> usize {
        1_000
    }

    fn default_dim() -> usize {
        16
    }

    fn default_selection() -> String {
        "ucb".into()
    }

    fn default_budget() -> f64 {
        500.0
    }

    fn default_sim_s() -> f64 {
        60.0
    }

    fn default_train_s() -> f64 {
        340.0
    }

    fn default_infer_s() -> f64 {
        900.0
    }

    fn default_sample_s() -> f64 {
        2.0
    }

    fn default_sim_out() -> u64 {
        1_000_000
    }

    fn default_train_out() -> u64 {
        10_000_000
    }

    fn default_infer_roundtrip() -> u64 {
        2_400_000_000
    }

    fn default_sample_out() -> u64 {
        3_000_000
    }

    fn default_seed_examples() -> usize {
        200
    }

    fn default_new_structures() -> usize {
        100
    }

    fn default_audit_target() -> usize {
        8
    }

    fn default_uncertainty_cap() -> usize {
        32
    }

    fn default_noop_tasks() -> usize {
        50
    }
}

impl Default for AppSection {
    fn default() -> Self {
        toml::from_str("kind = \"noop-bench\"").expect("defaults parse")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub run: RunSection,
    pub relay: RelaySection,
    #[serde(default)]
    pub stores: Vec<StoreConfig>,
    #[serde(default)]
    pub sites: Vec<SiteSection>,
    #[serde(default)]
    pub endpoints: Vec<EndpointSection>,
    #[serde(default)]
    pub topics: Vec<TopicSection>,
    #[serde(default)]
    pub policy: PolicySection,
    #[serde(default)]
    pub app: AppSection,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        let cfg: RunConfig = toml::from_str(&text).map_err(|e| ConfigError::Parse {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        let text = toml::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| ConfigError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        })
    }

    pub fn store(&self, id: &str) -> Option<&StoreConfig> {
        self.stores.iter().find(|s| s.id == id)
    }

    pub fn endpoint(&self, id: &str) -> Option<&EndpointSection> {
        self.endpoints.iter().find(|e| e.id == id)
    }

    pub fn topic(&self, name: &str) -> Option<&TopicSection> {
        self.topics.iter().find(|t| t.name == name)
    }

    /// The per-topic proxy policy used by the task-serving side.
    pub fn proxy_policy(&self) -> Result<ProxyPolicy, ConfigError> {
        let mut policy = ProxyPolicy::disabled();
        for t in &self.topics {
            let threshold = t
                .proxy_threshold
                .to_threshold()
                .map_err(|e| ConfigError::Invalid(vec![format!("topic {}: {e}", t.name)]))?;
            let store_id = StoreId(t.proxy_store.clone().unwrap_or_default());
            policy.set_topic(t.name.clone(), TopicRule { threshold, store_id });
        }
        Ok(policy)
    }

    /// Structural and routing checks, run before any process starts.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errors = Vec::new();

        if let Err(e) = self.relay.tiers.validate() {
            errors.push(format!("relay tiers: {e}"));
        }
        for s in &self.stores {
            if let Err(e) = s.network.validate() {
                errors.push(format!("store {}: {e}", s.id));
            }
            if s.capacity_bytes == 0 {
                errors.push(format!("store {}: capacity must be > 0", s.id));
            }
        }
        let site_names: Vec<&str> = self.sites.iter().map(|s| s.name.as_str()).collect();
        for ep in &self.endpoints {
            if ep.worker_slots < 1 {
                errors.push(format!("endpoint {}: worker_slots must be >= 1", ep.id));
            }
            if !site_names.contains(&ep.site.as_str()) {
                errors.push(format!("endpoint {}: unknown site {}", ep.id, ep.site));
            }
            for sid in &ep.stores {
                if self.store(sid).is_none() {
                    errors.push(format!("endpoint {}: unknown store {sid}", ep.id));
                }
            }
        }
        for t in &self.topics {
            let Some(ep) = self.endpoint(&t.endpoint) else {
                errors.push(format!("topic {}: unknown endpoint {}", t.name, t.endpoint));
                continue;
            };
            // Resource typing: a topic whose function demands a resource
            // kind must route to an endpoint of that kind. Submitting
            // elsewhere is a client bug; it is caught here, before any
            // submission happens.
            if let Some(required) = crate::apps::builtin_resource_kind(&t.function) {
                if ep.resource_kind != required {
                    errors.push(format!(
                        "topic {}: function {} requires a {} endpoint but routes to {} ({})",
                        t.name,
                        t.function,
                        required.as_str(),
                        ep.id,
                        ep.resource_kind.as_str(),
                    ));
                }
            }
            if let Some(store) = &t.proxy_store {
                if self.store(store).is_none() {
                    errors.push(format!("topic {}: unknown proxy store {store}", t.name));
                }
                if !ep.stores.iter().any(|s| s == store) {
                    errors.push(format!(
                        "topic {}: proxy store {store} is not bound at endpoint {}",
                        t.name, ep.id
                    ));
                }
            } else if t.proxy_threshold != ThresholdCfg::Named("disabled".into()) {
                errors.push(format!(
                    "topic {}: a proxy threshold needs a proxy_store",
                    t.name
                ));
            }
        }
        if self.policy.ensemble_size < 1 {
            errors.push("policy: ensemble_size must be >= 1".into());
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(errors))
        }
    }

    /// Which sites share a filesystem with `site` (reflexive closure of the
    /// declared pairs).
    pub fn shared_fs_sites(&self, site: &str) -> Vec<String> {
        let mut out: Vec<String> = vec![site.to_owned()];
        for s in &self.sites {
            if s.name == site {
                out.extend(s.shared_fs_with.iter().cloned());
            } else if s.shared_fs_with.iter().any(|o| o == site) {
                out.push(s.name.clone());
            }
        }
        out.sort();
        out.dedup();
        out
    }

    /// Topic-name -> endpoint-id routing map.
    pub fn topic_routes(&self) -> BTreeMap<String, String> {
        self.topics
            .iter()
            .map(|t| (t.name.clone(), t.endpoint.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_toml() -> String {
        r#"
            [relay]
            listen = "127.0.0.1:0"

            [[stores]]
            id = "kv-main"
            kind = "memory-kv"
            address = "127.0.0.1:0"

            [[sites]]
            name = "cpu-site"

            [[endpoints]]
            id = "ep-cpu"
            site = "cpu-site"
            resource_kind = "cpu"
            worker_slots = 2
            stores = ["kv-main"]

            [[topics]]
            name = "noop"
            function = "noop"
            endpoint = "ep-cpu"
            proxy_threshold = 0
            proxy_store = "kv-main"

            [app]
            kind = "noop-bench"
        "#
        .to_owned()
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: RunConfig = toml::from_str(&minimal_toml()).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.policy.ensemble_size, 8);
        assert_eq!(cfg.relay.tiers.fast_threshold_bytes, 20_000);
        assert!((cfg.run.time_scale - 1.0 / 30.0).abs() < 1e-12);
    }

    #[test]
    fn disabled_threshold_parses() {
        let toml_text = minimal_toml().replace(
            "proxy_threshold = 0\n            proxy_store = \"kv-main\"",
            "proxy_threshold = \"disabled\"",
        );
        let cfg: RunConfig = toml::from_str(&toml_text).unwrap();
        cfg.validate().unwrap();
        let policy = cfg.proxy_policy().unwrap();
        assert_eq!(
            policy.rule_for("noop").threshold,
            crate::refcore::Threshold::Disabled
        );
    }

    #[test]
    fn gpu_function_on_cpu_endpoint_is_rejected() {
        let toml_text = minimal_toml().replace("function = \"noop\"", "function = \"train\"");
        let cfg: RunConfig = toml::from_str(&toml_text).unwrap();
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("requires a gpu endpoint"));
    }

    #[test]
    fn relay_section_has_no_endpoint_address_fields() {
        // Structural check of the no-inbound-connections contract: the
        // relay's config schema must not name any endpoint address.
        let cfg: RunConfig = toml::from_str(&minimal_toml()).unwrap();
        let as_json = serde_json::to_value(&cfg.relay).unwrap();
        let keys: Vec<String> = as_json.as_object().unwrap().keys().cloned().collect();
        for key in keys {
            assert!(
                !key.contains("endpoint"),
                "relay config unexpectedly references endpoints via {key}"
            );
        }
    }

    #[test]
    fn roundtrips_through_toml() {
        let cfg: RunConfig = toml::from_str(&minimal_toml()).unwrap();
        let text = toml::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        back.validate().unwrap();
        assert_eq!(back.endpoints[0].id, "ep-cpu");
    }
}
