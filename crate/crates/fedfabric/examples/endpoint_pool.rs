//! An endpoint worker pool executing registered builtins with per-phase
//! timings: fetch, restore proxied inputs, execute, proxy the result back.
//!
//! ```bash
//! cargo run --example endpoint_pool
//! ```

use std::time::{Duration, Instant};

use fedfabric::apps::tasks::{DurationModel, FunctionParams};
use fedfabric::bench::EventLog;
use fedfabric::clock::monotonic_ns;
use fedfabric::config::ResourceKind;
use fedfabric::endpoint::{EndpointHandle, EndpointSpec};
use fedfabric::refcore::{ProxyPolicy, TaskPayload};
use fedfabric::relay::{RelayClient, RelayServer, TaskDescriptor, TaskId, TierPolicy};
use fedfabric::stores::{MemoryKvServer, NetworkModel, StoreConfig, StoreKind};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let relay = RelayServer::start("127.0.0.1:0", TierPolicy::default(), 60_000)?;
    let kv = MemoryKvServer::start("127.0.0.1:0", NetworkModel::fast_local(), 1 << 30)?;
    let client = RelayClient::new(relay.local_addr().to_string());

    // A 400 ms synthetic workload.
    let params = FunctionParams {
        duration: DurationModel::Constant { ms: 400.0 },
        ..Default::default()
    };
    let function = client.register_function("noop", "noop", &params.to_json())?;
    let ids: Vec<TaskId> = (0..10).map(|i| TaskId(format!("pool-{i}"))).collect();
    for id in &ids {
        let mut payload = TaskPayload::new();
        payload.push_inline("input", vec![1u8; 10_000])?;
        client.submit(&TaskDescriptor {
            task_id: id.clone(),
            function_id: function.clone(),
            endpoint_id: "ep-pool".into(),
            topic: "noop".into(),
            payload,
            created_ns: monotonic_ns(),
            tier: None,
        })?;
    }

    let spec = EndpointSpec {
        endpoint_id: "ep-pool".into(),
        site_name: "demo-site".into(),
        resource_kind: ResourceKind::Cpu,
        worker_slots: 4,
        store_bindings: vec![StoreConfig {
            id: "kv-demo".into(),
            kind: StoreKind::MemoryKv,
            address: Some(kv.local_addr().to_string()),
            root: None,
            capacity_bytes: 1 << 30,
            network: NetworkModel::default(),
        }],
        shared_fs_sites: Default::default(),
        drain_timeout: Duration::from_secs(10),
        proxy_policy: ProxyPolicy::disabled(),
        cache_capacity_bytes: 1 << 30,
        relay_addr: relay.local_addr().to_string(),
    };
    println!("starting endpoint with 4 worker slots; 10 x 400 ms tasks queued");
    let t0 = Instant::now();
    let handle = EndpointHandle::spawn(spec, EventLog::disabled(), None);

    for id in &ids {
        let envelope = client.get_result(id, 30_000)?.expect("result");
        let t = &envelope.timings;
        println!(
            "{} on {}: deser {:5.2} ms | resolve {:5.2} ms | exec {:6.1} ms | ser {:5.2} ms | total {:6.1} ms",
            envelope.task_id,
            envelope.worker_id,
            t.deserialize_ms(),
            t.resolve_ms(),
            t.execute_ms(),
            t.serialize_ms(),
            t.time_on_worker_ms(),
        );
    }
    println!(
        "\n10 tasks through 4 slots in {:.2}s (three 0.4s waves expected)",
        t0.elapsed().as_secs_f64()
    );
    let report = handle.shutdown_and_join()?;
    println!(
        "endpoint report: executed {} posted {} peak-concurrent {}",
        report.executed, report.posted, report.peak_concurrent
    );
    Ok(())
}
