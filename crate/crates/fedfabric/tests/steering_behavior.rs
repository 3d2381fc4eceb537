//! Thinker runtime behavior: smoke path, fail-fast aborts, decision
//! latency without data access, and the in-process task-server pipeline.

mod common;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use fedfabric::bench::EventLog;
use fedfabric::config::{PolicySection, ResourceKind};
use fedfabric::endpoint::{EndpointHandle, EndpointSpec};
use fedfabric::refcore::{
    ProxyPolicy, ResolveCache, Resolver, StoreKind, StoreRegistry, TaskPayload, Threshold,
    TopicRule,
};
use fedfabric::relay::{RelayClient, RelayServer, TierPolicy};
use fedfabric::steering::{
    run_thinker, Agent, AgentCx, AgentEvent, AgentFlow, PrioritizedTaskQueue, SteeringError,
    SteeringPolicy, ThinkerDeps, TopicRoute, Trigger,
};
use fedfabric::stores::{MemoryKvClient, MemoryKvServer, NetworkModel, StoreConfig};

struct Mini {
    relay: RelayServer,
    kv_server: MemoryKvServer,
    endpoint: Option<EndpointHandle>,
}

fn mini_fabric(slots: usize) -> (Mini, ThinkerDeps) {
    let tiers = TierPolicy {
        fast_tier: NetworkModel {
            request_latency_ms: 0.2,
            ..Default::default()
        },
        blob_tier: NetworkModel {
            request_latency_ms: 0.5,
            ..Default::default()
        },
        ..Default::default()
    };
    let relay = RelayServer::start("127.0.0.1:0", tiers, 60_000).unwrap();
    let relay_addr = relay.local_addr().to_string();
    let kv_server = MemoryKvServer::start("127.0.0.1:0", NetworkModel::default(), 8 << 30).unwrap();
    let kv_addr = kv_server.local_addr().to_string();

    let client = RelayClient::new(relay_addr.clone());
    let noop_fn = client.register_function("noop", "noop", b"").unwrap();

    let mut proxy_policy = ProxyPolicy::disabled();
    proxy_policy.set_topic(
        "noop",
        TopicRule {
            threshold: Threshold::Disabled,
            store_id: "kv-main".into(),
        },
    );

    let store_cfg = StoreConfig {
        id: "kv-main".into(),
        kind: StoreKind::MemoryKv,
        address: Some(kv_addr.clone()),
        root: None,
        capacity_bytes: 8 << 30,
        network: NetworkModel::default(),
    };
    let spec = EndpointSpec {
        endpoint_id: "ep-test".into(),
        site_name: "cpu-site".into(),
        resource_kind: ResourceKind::Cpu,
        worker_slots: slots,
        store_bindings: vec![store_cfg.clone()],
        shared_fs_sites: Default::default(),
        drain_timeout: Duration::from_secs(10),
        proxy_policy: proxy_policy.clone(),
        cache_capacity_bytes: 1 << 30,
        relay_addr: relay_addr.clone(),
    };
    let endpoint = EndpointHandle::spawn(spec, EventLog::disabled(), None);

    let registry = Arc::new(StoreRegistry::new());
    registry.register(Arc::new(MemoryKvClient::new("kv-main".into(), kv_addr)));
    let resolver = Resolver::new(registry, Arc::new(ResolveCache::default()));

    let mut routes = BTreeMap::new();
    routes.insert(
        "noop".to_owned(),
        TopicRoute {
            endpoint_id: "ep-test".into(),
            function_id: noop_fn,
            endpoint_kind: ResourceKind::Cpu,
        },
    );
    let deps = ThinkerDeps {
        relay_addr,
        events: EventLog::disabled(),
        routes,
        proxy_policy,
        resolver,
        policy: SteeringPolicy::from_config(&PolicySection::default()).unwrap(),
        drain_timeout: Duration::from_secs(20),
    };
    (
        Mini {
            relay,
            kv_server,
            endpoint: Some(endpoint),
        },
        deps,
    )
}

fn noop_payload() -> TaskPayload {
    let mut p = TaskPayload::new();
    p.push_inline("input", vec![0u8; 128]).unwrap();
    p
}

#[derive(Debug, Default)]
struct SmokeState {
    submitted: usize,
    received: usize,
}

#[test]
fn on_start_agent_submits_k_tasks_and_run_ends() {
    let _guard = common::fabric_lock();
    let (mut mini, deps) = mini_fabric(2);
    const K: usize = 6;

    let starter = Agent::new(
        "starter",
        Trigger::OnStart,
        |cx: &AgentCx<SmokeState>, _event| {
            for _ in 0..K {
                cx.submit_task("noop", noop_payload())?;
            }
            cx.state().submitted = K;
            Ok(AgentFlow::Continue)
        },
    );
    let collector = Agent::new(
        "collector",
        Trigger::OnResult("noop".into()),
        |cx: &AgentCx<SmokeState>, event| {
            let AgentEvent::Result(result) = event else {
                return Ok(AgentFlow::Continue);
            };
            assert_eq!(
                result.envelope.status,
                fedfabric::relay::ResultStatus::Success
            );
            let mut st = cx.state();
            st.received += 1;
            Ok(if st.received == K {
                AgentFlow::Stop
            } else {
                AgentFlow::Continue
            })
        },
    );

    let final_state = run_thinker(vec![starter, collector], SmokeState::default(), deps).unwrap();
    assert_eq!(final_state.submitted, K);
    assert_eq!(final_state.received, K);
    mini.endpoint.take().unwrap().shutdown_and_join().unwrap();
    drop(mini);
}

#[test]
fn agent_error_aborts_the_run_fail_fast() {
    let _guard = common::fabric_lock();
    let (mut mini, deps) = mini_fabric(1);

    let starter = Agent::new(
        "starter",
        Trigger::OnStart,
        |cx: &AgentCx<SmokeState>, _event| {
            cx.submit_task("noop", noop_payload())?;
            Ok(AgentFlow::Continue)
        },
    );
    let exploder = Agent::new(
        "exploder",
        Trigger::OnResult("noop".into()),
        |_cx: &AgentCx<SmokeState>, _event| {
            Err(SteeringError::Runtime("synthetic agent failure".into()))
        },
    );

    let err = run_thinker(vec![starter, exploder], SmokeState::default(), deps).unwrap_err();
    let text = err.to_string();
    assert!(
        text.contains("exploder") && text.contains("synthetic agent failure"),
        "unexpected error: {text}"
    );
    mini.endpoint.take().unwrap().shutdown_and_join().unwrap();
    drop(mini);
}

#[test]
fn unknown_topic_is_a_config_error() {
    let _guard = common::fabric_lock();
    let (mut mini, deps) = mini_fabric(1);
    let starter = Agent::new(
        "starter",
        Trigger::OnStart,
        |cx: &AgentCx<SmokeState>, _event| {
            match cx.submit_task("no-such-topic", noop_payload()) {
                Err(SteeringError::UnknownTopic(t)) => {
                    assert_eq!(t, "no-such-topic");
                    Ok(AgentFlow::Stop)
                }
                other => panic!("expected unknown-topic error, got {other:?}"),
            }
        },
    );
    run_thinker(vec![starter], SmokeState::default(), deps).unwrap();
    mini.endpoint.take().unwrap().shutdown_and_join().unwrap();
    drop(mini);
}

struct DecisionState {
    queue: Arc<PrioritizedTaskQueue<u64>>,
    decisions: usize,
    decision_gets: Vec<u64>,
    decision_ms: Vec<f64>,
    received: usize,
    total: usize,
}

/// The simulation-chaining decision never touches a store: across each
/// decision the KV server's get counter and the thinker cache's fetch
/// counter stay flat, while decision latency stays in single-digit
/// milliseconds.
#[test]
fn chaining_decisions_touch_no_stores_and_stay_fast() {
    let _guard = common::fabric_lock();
    let (mut mini, deps) = mini_fabric(2);
    let kv_stats_addr = mini.kv_server.local_addr().to_string();
    let kv_probe = MemoryKvClient::new("kv-main".into(), kv_stats_addr);

    const TOTAL: usize = 12;
    let queue = Arc::new(PrioritizedTaskQueue::new());
    queue.extend((0..TOTAL as u64).map(|i| (i, i as f64)));

    let starter = Agent::new(
        "starter",
        Trigger::OnStart,
        |cx: &AgentCx<DecisionState>, _event| {
            let first = {
                let st = cx.state();
                [st.queue.pop(), st.queue.pop(), st.queue.pop()]
            };
            for id in first.into_iter().flatten() {
                let mut p = noop_payload();
                p.set_meta("candidate", id.to_string());
                cx.submit_task("noop", p)?;
            }
            Ok(AgentFlow::Continue)
        },
    );

    let probe = Arc::new(kv_probe);
    let chain = {
        let probe = Arc::clone(&probe);
        Agent::new(
            "chain",
            Trigger::OnResult("noop".into()),
            move |cx: &AgentCx<DecisionState>, event| {
                let AgentEvent::Result(result) = event else {
                    return Ok(AgentFlow::Continue);
                };
                let gets_before =
                    probe.server_stats().map(|s| s.gets).unwrap_or(0) + cx.cache_stats().fetches;
                let t0 = std::time::Instant::now();
                // The decision: pop the head; never read result payload
                // bytes.
                let next = cx.state().queue.pop();
                let decision_ms = t0.elapsed().as_secs_f64() * 1e3;
                let gets_after =
                    probe.server_stats().map(|s| s.gets).unwrap_or(0) + cx.cache_stats().fetches;
                {
                    let mut st = cx.state();
                    st.received += 1;
                    st.decisions += 1;
                    st.decision_gets.push(gets_after - gets_before);
                    st.decision_ms.push(decision_ms);
                }
                if let Some(id) = next {
                    let mut p = noop_payload();
                    p.set_meta("candidate", id.to_string());
                    cx.submit_task("noop", p)?;
                }
                let st = cx.state();
                Ok(if st.received == st.total {
                    AgentFlow::Stop
                } else {
                    AgentFlow::Continue
                })
            },
        )
    };

    let state = DecisionState {
        queue: Arc::clone(&queue),
        decisions: 0,
        decision_gets: Vec::new(),
        decision_ms: Vec::new(),
        received: 0,
        total: TOTAL,
    };
    let final_state = run_thinker(vec![starter, chain], state, deps).unwrap();

    assert_eq!(final_state.received, TOTAL);
    assert!(
        final_state.decision_gets.iter().all(|d| *d == 0),
        "decisions performed store gets: {:?}",
        final_state.decision_gets
    );
    let mut sorted = final_state.decision_ms.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let median = sorted[sorted.len() / 2];
    assert!(median <= 50.0, "median decision {median:.2} ms exceeds 50 ms");
    mini.endpoint.take().unwrap().shutdown_and_join().unwrap();
    drop(mini);
}

#[test]
fn resource_free_events_fire_for_matching_kind() {
    let _guard = common::fabric_lock();
    let (mut mini, deps) = mini_fabric(1);
    let frees = Arc::new(AtomicUsize::new(0));

    let starter = Agent::new(
        "starter",
        Trigger::OnStart,
        |cx: &AgentCx<SmokeState>, _event| {
            cx.submit_task("noop", noop_payload())?;
            Ok(AgentFlow::Continue)
        },
    );
    let collector = Agent::new(
        "collector",
        Trigger::OnResult("noop".into()),
        |cx: &AgentCx<SmokeState>, _event| {
            cx.state().received += 1;
            Ok(AgentFlow::Continue)
        },
    );
    let free_watcher = {
        let frees = Arc::clone(&frees);
        Agent::new(
            "free-watcher",
            Trigger::OnResourceFree(ResourceKind::Cpu),
            move |cx: &AgentCx<SmokeState>, event| {
                let AgentEvent::ResourceFree(kind) = event else {
                    return Ok(AgentFlow::Continue);
                };
                assert_eq!(kind, ResourceKind::Cpu);
                frees.fetch_add(1, Ordering::SeqCst);
                if cx.state().received >= 1 {
                    Ok(AgentFlow::Stop)
                } else {
                    Ok(AgentFlow::Continue)
                }
            },
        )
    };

    run_thinker(
        vec![starter, collector, free_watcher],
        SmokeState::default(),
        deps,
    )
    .unwrap();
    assert!(frees.load(Ordering::SeqCst) >= 1);
    mini.endpoint.take().unwrap().shutdown_and_join().unwrap();
    drop(mini);
}
