//! Store-and-forward through the relay: tasks submitted while no endpoint
//! exists are held, delivered FIFO on connect, redelivered after lease
//! expiry, and results are kept for absent clients with first-wins
//! acceptance.
//!
//! ```bash
//! cargo run --example relay_store_forward
//! ```

use std::time::Duration;

use fedfabric::clock::monotonic_ns;
use fedfabric::refcore::TaskPayload;
use fedfabric::relay::{
    RelayClient, RelayServer, ResultEnvelope, ResultStatus, TaskDescriptor, TaskId, TierPolicy,
    WorkerTimings,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let relay = RelayServer::start("127.0.0.1:0", TierPolicy::default(), 1_500)?;
    let client = RelayClient::new(relay.local_addr().to_string());
    println!("relay on {} (lease timeout 1.5 s)", relay.local_addr());

    let function = client.register_function("noop", "noop", b"")?;
    for i in 0..3 {
        let mut payload = TaskPayload::new();
        payload.push_inline("input", vec![i as u8; 1_000])?;
        client.submit(&TaskDescriptor {
            task_id: TaskId(format!("task-{i}")),
            function_id: function.clone(),
            endpoint_id: "ep-demo".into(),
            topic: "noop".into(),
            payload,
            created_ns: monotonic_ns(),
            tier: None,
        })?;
    }
    println!("submitted 3 tasks with no endpoint connected");
    println!("relay stats: {:?}\n", relay.stats());

    // An endpoint appears, pairs, and fetches.
    let endpoint = RelayClient::new(relay.local_addr().to_string());
    let token = endpoint.pair(&"ep-demo".into())?;
    let batch = endpoint.fetch_tasks(&"ep-demo".into(), &token, 2, 100)?;
    println!(
        "fetched {} tasks in FIFO order: {:?}",
        batch.len(),
        batch.iter().map(|t| t.task_id.0.as_str()).collect::<Vec<_>>()
    );

    // Post a result for the first; "crash" before acking the second.
    endpoint.post_result(
        &"ep-demo".into(),
        &token,
        &ResultEnvelope {
            task_id: batch[0].task_id.clone(),
            status: ResultStatus::Success,
            message: None,
            payload: TaskPayload::new(),
            timings: WorkerTimings::default(),
            worker_id: "ep-demo/0".into(),
        },
    )?;
    println!("posted result for {}; task-1 lease left to expire...", batch[0].task_id);

    std::thread::sleep(Duration::from_millis(2_200));
    let redelivered = endpoint.fetch_tasks(&"ep-demo".into(), &token, 4, 500)?;
    println!(
        "after lease expiry, fetch returned: {:?}",
        redelivered
            .iter()
            .map(|t| t.task_id.0.as_str())
            .collect::<Vec<_>>()
    );

    // The client was away the whole time; the result is still there.
    let envelope = client.get_result(&TaskId("task-0".into()), 1_000)?.unwrap();
    println!("client reconnected and got task-0 from {}", envelope.worker_id);
    println!("final stats: {:?}", relay.stats());
    Ok(())
}
