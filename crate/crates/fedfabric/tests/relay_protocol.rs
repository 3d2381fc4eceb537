//! Relay protocol behavior over real sockets: registration idempotency,
//! tiering, the payload cap, store-and-forward, leases, and result
//! exactly-once acceptance.

use std::time::{Duration, Instant};

use fedfabric::clock::monotonic_ns;
use fedfabric::refcore::TaskPayload;
use fedfabric::relay::{
    RelayClient, RelayServer, ResultEnvelope, ResultStatus, TaskDescriptor, TaskId, Tier,
    TierPolicy, WorkerTimings,
};
use fedfabric::stores::NetworkModel;

fn quick_tiers() -> TierPolicy {
    TierPolicy {
        fast_threshold_bytes: 20_000,
        max_payload_bytes: 10_000_000,
        fast_tier: NetworkModel {
            request_latency_ms: 0.1,
            ..Default::default()
        },
        blob_tier: NetworkModel {
            request_latency_ms: 0.2,
            ..Default::default()
        },
    }
}

fn start_relay() -> (RelayServer, RelayClient) {
    let server = RelayServer::start("127.0.0.1:0", quick_tiers(), 60_000).unwrap();
    let client = RelayClient::new(server.local_addr().to_string());
    (server, client)
}

fn descriptor(task_id: &str, function_id: &fedfabric::relay::FunctionId, payload_bytes: usize) -> TaskDescriptor {
    let mut payload = TaskPayload::new();
    payload.push_inline("input", vec![7u8; payload_bytes]).unwrap();
    TaskDescriptor {
        task_id: TaskId(task_id.to_owned()),
        function_id: function_id.clone(),
        endpoint_id: "ep-1".into(),
        topic: "noop".into(),
        payload,
        created_ns: monotonic_ns(),
        tier: None,
    }
}

fn envelope(task_id: &str) -> ResultEnvelope {
    ResultEnvelope {
        task_id: TaskId(task_id.to_owned()),
        status: ResultStatus::Success,
        message: None,
        payload: TaskPayload::new(),
        timings: WorkerTimings::default(),
        worker_id: "ep-1/0".into(),
    }
}

#[test]
fn register_is_idempotent_for_same_body() {
    let (_server, client) = start_relay();
    let a = client.register_function("noop", "noop", b"{}").unwrap();
    let b = client.register_function("noop", "noop", b"{}").unwrap();
    assert_eq!(a, b);
    let c = client.register_function("other", "noop", b"{}").unwrap();
    assert_ne!(a, c);
    let d = client.register_function("noop", "noop", b"{\"x\":1}").unwrap();
    assert_ne!(a, d);
}

#[test]
fn submit_rejects_unknown_function() {
    let (_server, client) = start_relay();
    let fake = fedfabric::relay::FunctionId("deadbeef".into());
    let err = client.submit(&descriptor("t0", &fake, 10)).unwrap_err();
    assert!(matches!(err, fedfabric::relay::RelayError::UnknownFunction(_)));
}

#[test]
fn tier_boundaries_and_payload_cap() {
    let (_server, client) = start_relay();
    let f = client.register_function("noop", "noop", b"").unwrap();

    // Payload encoding adds framing bytes around the field, so aim the
    // *serialized* length exactly at the boundaries.
    let overhead = {
        let mut p = TaskPayload::new();
        p.push_inline("input", vec![]).unwrap();
        p.encoded_len()
    };
    let at = |total: usize| descriptor("t-b", &f, total - overhead);

    assert_eq!(client.submit(&at(19_999)).unwrap(), Tier::Fast);
    assert_eq!(client.submit(&at(20_000)).unwrap(), Tier::Blob);
    assert_eq!(client.submit(&at(10_000_000)).unwrap(), Tier::Blob);
    let err = client.submit(&at(10_000_001)).unwrap_err();
    assert!(matches!(
        err,
        fedfabric::relay::RelayError::PayloadTooLarge { .. }
    ));
}

#[test]
fn fetch_requires_pairing_token() {
    let (_server, client) = start_relay();
    let err = client
        .fetch_tasks(&"ep-1".into(), &hex::encode([0u8; 32]), 1, 10)
        .unwrap_err();
    assert!(matches!(err, fedfabric::relay::RelayError::Auth(_)));
}

#[test]
fn store_and_forward_fifo_delivery() {
    let (server, client) = start_relay();
    let f = client.register_function("noop", "noop", b"").unwrap();
    // Submit three tasks while no endpoint has ever connected.
    for i in 0..3 {
        client.submit(&descriptor(&format!("t{i}"), &f, 10)).unwrap();
    }
    assert_eq!(server.stats().queued, 3);

    // Endpoint appears later and drains in FIFO order.
    let ep = RelayClient::new(client.addr().to_string());
    let token = ep.pair(&"ep-1".into()).unwrap();
    let first_two = ep.fetch_tasks(&"ep-1".into(), &token, 2, 100).unwrap();
    assert_eq!(first_two.len(), 2);
    assert_eq!(first_two[0].task_id.0, "t0");
    assert_eq!(first_two[1].task_id.0, "t1");
    assert_eq!(first_two[0].tier, Some(Tier::Fast));
    let rest = ep.fetch_tasks(&"ep-1".into(), &token, 2, 100).unwrap();
    assert_eq!(rest.len(), 1);
    assert_eq!(rest[0].task_id.0, "t2");

    let snap = server.stats();
    assert_eq!(snap.in_flight, 3);
    assert_eq!(snap.queued, 0);
    assert_eq!(
        snap.submitted,
        snap.queued + snap.in_flight + snap.completed + snap.rejected
    );
}

#[test]
fn empty_fetch_honors_long_poll_timeout() {
    let (_server, client) = start_relay();
    let token = client.pair(&"ep-1".into()).unwrap();
    let t0 = Instant::now();
    let tasks = client.fetch_tasks(&"ep-1".into(), &token, 4, 120).unwrap();
    let elapsed = t0.elapsed();
    assert!(tasks.is_empty());
    assert!(elapsed >= Duration::from_millis(100), "returned too early: {elapsed:?}");
    assert!(elapsed < Duration::from_millis(600), "overshot: {elapsed:?}");
}

#[test]
fn lease_expiry_redelivers_unacked_tasks() {
    let server = RelayServer::start("127.0.0.1:0", quick_tiers(), 700).unwrap();
    let client = RelayClient::new(server.local_addr().to_string());
    let f = client.register_function("noop", "noop", b"").unwrap();
    client.submit(&descriptor("t0", &f, 10)).unwrap();

    let token = client.pair(&"ep-1".into()).unwrap();
    let got = client.fetch_tasks(&"ep-1".into(), &token, 1, 100).unwrap();
    assert_eq!(got.len(), 1);
    // Crash without acking: the task must come back after the lease.
    let redelivered = client.fetch_tasks(&"ep-1".into(), &token, 1, 3_000).unwrap();
    assert_eq!(redelivered.len(), 1);
    assert_eq!(redelivered[0].task_id.0, "t0");
}

#[test]
fn results_are_first_wins_and_survive_client_absence() {
    let (server, client) = start_relay();
    let f = client.register_function("noop", "noop", b"").unwrap();
    client.submit(&descriptor("t0", &f, 10)).unwrap();

    let token = client.pair(&"ep-1".into()).unwrap();
    client.fetch_tasks(&"ep-1".into(), &token, 1, 100).unwrap();

    // Result pending before any post.
    assert!(client.get_result(&TaskId("t0".into()), 50).unwrap().is_none());

    assert!(!client.post_result(&"ep-1".into(), &token, &envelope("t0")).unwrap());
    // Duplicate post is acked but the first result wins.
    let mut dup = envelope("t0");
    dup.worker_id = "ep-1/9".into();
    assert!(client.post_result(&"ep-1".into(), &token, &dup).unwrap());

    let got = client.get_result(&TaskId("t0".into()), 1_000).unwrap().unwrap();
    assert_eq!(got.worker_id, "ep-1/0");
    assert_eq!(server.stats().completed, 1);

    // Unknown task ids are errors, not "pending".
    let err = client.get_result(&TaskId("nope".into()), 10).unwrap_err();
    assert!(matches!(err, fedfabric::relay::RelayError::UnknownTask(_)));
}

#[test]
fn pause_severs_and_resume_restores_with_state() {
    let (server, client) = start_relay();
    let f = client.register_function("noop", "noop", b"").unwrap();
    client.submit(&descriptor("t0", &f, 10)).unwrap();

    server.pause();
    let err = client.submit(&descriptor("t1", &f, 10)).unwrap_err();
    assert!(err.is_retriable(), "expected retriable outage error, got {err}");

    server.resume().unwrap();
    client.submit(&descriptor("t2", &f, 10)).unwrap();
    // t0 survived the outage, t1 never made it in, t2 arrived after resume.
    let snap = server.stats();
    assert_eq!(snap.queued, 2);
}

#[test]
fn clock_offset_probe_is_small_on_one_host() {
    let (_server, client) = start_relay();
    let offset = client.measure_clock_offset(16).unwrap();
    assert!(
        offset.abs() < 50_000_000,
        "same-host offset should be tiny, got {offset} ns"
    );
}
