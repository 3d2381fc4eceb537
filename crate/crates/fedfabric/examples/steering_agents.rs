//! A minimal Thinker: cooperating agents over shared state, submitting
//! topic-tagged tasks through the in-process task server and reacting to
//! per-topic results. One agent chains submissions; another reads result
//! data; the run drains and stops when the work budget is spent.
//!
//! ```bash
//! cargo run --example steering_agents
//! ```

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use fedfabric::apps::tasks::{DurationModel, FunctionParams};
use fedfabric::bench::EventLog;
use fedfabric::config::{PolicySection, ResourceKind};
use fedfabric::endpoint::{EndpointHandle, EndpointSpec};
use fedfabric::refcore::{
    ProxyPolicy, ResolveCache, Resolver, StoreRegistry, TaskPayload, Threshold, TopicRule,
};
use fedfabric::relay::{RelayClient, RelayServer, TierPolicy};
use fedfabric::steering::{
    run_thinker, Agent, AgentCx, AgentEvent, AgentFlow, SteeringPolicy, ThinkerDeps, TopicRoute,
    Trigger,
};
use fedfabric::stores::{MemoryKvClient, MemoryKvServer, NetworkModel, StoreConfig, StoreKind};

#[derive(Debug, Default)]
struct DemoState {
    submitted: usize,
    finished: usize,
    bytes_seen: usize,
}

const BUDGET: usize = 12;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // In-process fabric: relay + kv store + one 3-slot endpoint.
    let relay = RelayServer::start("127.0.0.1:0", TierPolicy::default(), 60_000)?;
    let kv = MemoryKvServer::start("127.0.0.1:0", NetworkModel::fast_local(), 1 << 30)?;
    let relay_addr = relay.local_addr().to_string();

    let client = RelayClient::new(relay_addr.clone());
    let params = FunctionParams {
        duration: DurationModel::Constant { ms: 120.0 },
        output_padding_bytes: 40_000,
        ..Default::default()
    };
    let function = client.register_function("noop", "noop", &params.to_json())?;

    let mut proxy_policy = ProxyPolicy::disabled();
    proxy_policy.set_topic(
        "work",
        TopicRule {
            threshold: Threshold::Bytes(20_000),
            store_id: "kv-demo".into(),
        },
    );
    let store_cfg = StoreConfig {
        id: "kv-demo".into(),
        kind: StoreKind::MemoryKv,
        address: Some(kv.local_addr().to_string()),
        root: None,
        capacity_bytes: 1 << 30,
        network: NetworkModel::default(),
    };
    let endpoint = EndpointHandle::spawn(
        EndpointSpec {
            endpoint_id: "ep-demo".into(),
            site_name: "demo-site".into(),
            resource_kind: ResourceKind::Cpu,
            worker_slots: 3,
            store_bindings: vec![store_cfg.clone()],
            shared_fs_sites: Default::default(),
            drain_timeout: Duration::from_secs(10),
            proxy_policy: proxy_policy.clone(),
            cache_capacity_bytes: 1 << 30,
            relay_addr: relay_addr.clone(),
        },
        EventLog::disabled(),
        None,
    );

    // Thinker-side wiring: routes, stores, policy.
    let registry = Arc::new(StoreRegistry::new());
    registry.register(Arc::new(MemoryKvClient::new(
        "kv-demo".into(),
        kv.local_addr().to_string(),
    )));
    let resolver = Resolver::new(registry, Arc::new(ResolveCache::default()));
    let mut routes = BTreeMap::new();
    routes.insert(
        "work".to_owned(),
        TopicRoute {
            endpoint_id: "ep-demo".into(),
            function_id: function,
            endpoint_kind: ResourceKind::Cpu,
        },
    );

    let submit_one = |cx: &AgentCx<DemoState>| -> Result<bool, fedfabric::steering::SteeringError> {
        let n = {
            let mut st = cx.state();
            if st.submitted >= BUDGET {
                return Ok(false);
            }
            st.submitted += 1;
            st.submitted
        };
        let mut payload = TaskPayload::new();
        payload.push_inline("input", vec![n as u8; 1_024])?;
        cx.submit_task("work", payload)?;
        Ok(true)
    };

    // Agent 1: prime the pipeline with slots + 1 tasks.
    let starter = Agent::new(
        "starter",
        Trigger::OnStart,
        move |cx: &AgentCx<DemoState>, _| {
            for _ in 0..4 {
                submit_one(cx)?;
            }
            println!("starter: primed 4 tasks");
            Ok(AgentFlow::Continue)
        },
    );

    // Agent 2: chain a new submission per completion, stop at the budget.
    let chainer = Agent::new(
        "chainer",
        Trigger::OnResult("work".into()),
        move |cx: &AgentCx<DemoState>, event| {
            let AgentEvent::Result(_) = event else {
                return Ok(AgentFlow::Continue);
            };
            let done = {
                let mut st = cx.state();
                st.finished += 1;
                st.finished
            };
            submit_one(cx)?;
            if done == BUDGET {
                println!("chainer: budget of {BUDGET} reached, stopping");
                Ok(AgentFlow::Stop)
            } else {
                Ok(AgentFlow::Continue)
            }
        },
    );

    // Agent 3: resolve result payloads (the 40 kB outputs were proxied).
    let reader = Agent::new(
        "reader",
        Trigger::OnResult("work".into()),
        move |cx: &AgentCx<DemoState>, event| {
            let AgentEvent::Result(result) = event else {
                return Ok(AgentFlow::Continue);
            };
            let restored = cx.resolve_result(&result)?;
            let bytes: usize = restored
                .fields()
                .iter()
                .filter_map(|f| f.value.inline_len())
                .sum();
            cx.state().bytes_seen += bytes;
            println!(
                "reader: task {} delivered {} payload bytes (proxied through the kv store)",
                result.task_id, bytes
            );
            Ok(AgentFlow::Continue)
        },
    );

    let final_state = run_thinker(
        vec![starter, chainer, reader],
        DemoState::default(),
        ThinkerDeps {
            relay_addr,
            events: EventLog::disabled(),
            routes,
            proxy_policy,
            resolver,
            policy: SteeringPolicy::from_config(&PolicySection::default()).unwrap(),
            drain_timeout: Duration::from_secs(20),
        },
    )?;
    println!(
        "\nrun complete: {} submitted, {} finished, {} result bytes resolved",
        final_state.submitted, final_state.finished, final_state.bytes_seen
    );
    endpoint.shutdown_and_join()?;
    Ok(())
}
