//! Endpoint main loop: pair, fetch up to the free worker slots, dispatch
//! to the pool, post results, and drain cleanly on shutdown.

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, Receiver, Sender};
use log::{debug, info, warn};

use super::executor::{execute_task, ExecEnv};
use super::{EndpointError, EndpointSpec};
use crate::bench::{ClockOffsets, EventLog, Stage};
use crate::clock::Clock;
use crate::refcore::{ResolveCache, Resolver, StoreRegistry};
use crate::relay::{RelayClient, RelayError, ResultEnvelope, TaskDescriptor};
use crate::stores::open_store;

const FETCH_TIMEOUT_MS: u64 = 200;
const CLOCK_PROBES: usize = 16;

/// Exponential backoff for relay reconnects: base 200 ms, doubling to a
/// 10 s cap.
struct Backoff {
    current: Duration,
}

impl Backoff {
    fn new() -> Self {
        Backoff {
            current: Duration::from_millis(200),
        }
    }

    fn wait(&mut self, shutdown: &AtomicBool) {
        let deadline = Instant::now() + self.current;
        while Instant::now() < deadline && !shutdown.load(Ordering::SeqCst) {
            std::thread::sleep(Duration::from_millis(20));
        }
        self.current = (self.current * 2).min(Duration::from_secs(10));
    }

    fn reset(&mut self) {
        self.current = Duration::from_millis(200);
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EndpointReport {
    pub executed: u64,
    pub posted: u64,
    pub task_errors: u64,
    pub infra_errors: u64,
    /// Highest number of concurrently executing tasks ever observed; never
    /// exceeds the configured worker slots.
    pub peak_concurrent: usize,
}

struct Counters {
    executed: AtomicU64,
    posted: AtomicU64,
    task_errors: AtomicU64,
    infra_errors: AtomicU64,
    executing_now: AtomicUsize,
    peak_concurrent: AtomicUsize,
    outstanding: AtomicUsize,
}

impl Counters {
    fn new() -> Self {
        Counters {
            executed: AtomicU64::new(0),
            posted: AtomicU64::new(0),
            task_errors: AtomicU64::new(0),
            infra_errors: AtomicU64::new(0),
            executing_now: AtomicUsize::new(0),
            peak_concurrent: AtomicUsize::new(0),
            outstanding: AtomicUsize::new(0),
        }
    }
}

/// Run an endpoint until the shutdown flag flips, then drain: stop
/// fetching, finish in-flight tasks, and post their results before
/// returning.
pub fn run_endpoint(
    spec: EndpointSpec,
    events: Arc<EventLog>,
    out_dir: Option<PathBuf>,
    shutdown: Arc<AtomicBool>,
) -> Result<EndpointReport, EndpointError> {
    let registry = Arc::new(StoreRegistry::new());
    for store_cfg in &spec.store_bindings {
        match open_store(store_cfg, Clock::Wall) {
            Ok(store) => registry.register(store),
            Err(e) => {
                // A dead binding only fails tasks that reference it; the
                // endpoint itself keeps running.
                warn!("endpoint {}: store {} unavailable: {e}", spec.endpoint_id, store_cfg.id);
            }
        }
    }
    let cache = Arc::new(ResolveCache::new(spec.cache_capacity_bytes));
    let resolver = Resolver::new(Arc::clone(&registry), cache);
    let env = Arc::new(ExecEnv::new(
        resolver,
        spec.proxy_policy.clone(),
        Arc::clone(&events),
        Clock::Wall,
    ));

    // Outbound-only connectivity: both connections dial the relay.
    let fetch_client = RelayClient::new(spec.relay_addr.clone());
    let post_client = RelayClient::new(spec.relay_addr.clone());

    // Pair for the token, retrying through relay outages.
    let mut backoff = Backoff::new();
    let token = loop {
        if shutdown.load(Ordering::SeqCst) {
            return Ok(EndpointReport::default());
        }
        match fetch_client.pair(&spec.endpoint_id) {
            Ok(token) => break token,
            Err(RelayError::Auth(e)) => return Err(EndpointError::Auth(e)),
            Err(e) if e.is_retriable() => {
                debug!("pairing retry for {}: {e}", spec.endpoint_id);
                backoff.wait(&shutdown);
            }
            Err(e) => return Err(EndpointError::Auth(e.to_string())),
        }
    };
    backoff.reset();

    // Clock-offset sidecar for analysis-time skew correction.
    if let Some(dir) = &out_dir {
        if let Ok(offset) = fetch_client.measure_clock_offset(CLOCK_PROBES) {
            let path = dir.join(format!("clock-endpoint-{}.json", spec.endpoint_id));
            if let Err(e) = ClockOffsets::write(&path, -offset) {
                warn!("could not write clock sidecar: {e}");
            }
        }
    }

    let counters = Arc::new(Counters::new());
    let (task_tx, task_rx): (Sender<Vec<u8>>, Receiver<Vec<u8>>) = bounded(spec.worker_slots * 2);
    let (env_tx, env_rx): (Sender<(ResultEnvelope, String)>, Receiver<(ResultEnvelope, String)>) =
        bounded(spec.worker_slots * 2);

    let mut workers = Vec::new();
    for slot in 0..spec.worker_slots {
        let task_rx = task_rx.clone();
        let env_tx = env_tx.clone();
        let env = Arc::clone(&env);
        let counters = Arc::clone(&counters);
        let worker_id = format!("{}/{slot}", spec.endpoint_id);
        workers.push(
            std::thread::Builder::new()
                .name(format!("worker-{worker_id}"))
                .spawn(move || {
                    for raw in task_rx.iter() {
                        let now = counters.executing_now.fetch_add(1, Ordering::SeqCst) + 1;
                        counters.peak_concurrent.fetch_max(now, Ordering::SeqCst);
                        let topic = TaskDescriptor::decode(&raw)
                            .map(|d| d.topic)
                            .unwrap_or_default();
                        let envelope = execute_task(&raw, &worker_id, &env);
                        counters.executing_now.fetch_sub(1, Ordering::SeqCst);
                        counters.executed.fetch_add(1, Ordering::SeqCst);
                        match envelope.status {
                            crate::relay::ResultStatus::TaskError => {
                                counters.task_errors.fetch_add(1, Ordering::SeqCst);
                            }
                            crate::relay::ResultStatus::InfraError => {
                                counters.infra_errors.fetch_add(1, Ordering::SeqCst);
                            }
                            crate::relay::ResultStatus::Success => {}
                        }
                        if env_tx.send((envelope, topic)).is_err() {
                            return;
                        }
                    }
                })
                .map_err(|e| EndpointError::Io(e.to_string()))?,
        );
    }
    drop(env_tx);

    let poster = {
        let counters = Arc::clone(&counters);
        let events = Arc::clone(&events);
        let endpoint_id = spec.endpoint_id.clone();
        let token = token.clone();
        let shutdown = Arc::clone(&shutdown);
        std::thread::Builder::new()
            .name(format!("poster-{endpoint_id}"))
            .spawn(move || {
                let mut backoff = Backoff::new();
                for (envelope, topic) in env_rx.iter() {
                    // Stamped at post initiation: the relay persists and the
                    // client may observe the result before our ack returns.
                    events.record(&envelope.task_id.0, &topic, Stage::ResultPosted);
                    loop {
                        match post_client.post_result(&endpoint_id, &token, &envelope) {
                            Ok(_duplicate) => {
                                counters.posted.fetch_add(1, Ordering::SeqCst);
                                backoff.reset();
                                break;
                            }
                            Err(e) if e.is_retriable() => {
                                debug!("post retry for {}: {e}", envelope.task_id);
                                backoff.wait(&shutdown);
                            }
                            Err(e) => {
                                warn!("dropping result for {}: {e}", envelope.task_id);
                                break;
                            }
                        }
                    }
                    counters.outstanding.fetch_sub(1, Ordering::SeqCst);
                }
            })
            .map_err(|e| EndpointError::Io(e.to_string()))?
    };

    info!(
        "endpoint {} up: {} slots at site {}",
        spec.endpoint_id, spec.worker_slots, spec.site_name
    );

    // Fetch loop: request at most the currently free slots.
    while !shutdown.load(Ordering::SeqCst) {
        let outstanding = counters.outstanding.load(Ordering::SeqCst);
        let free = spec.worker_slots.saturating_sub(outstanding);
        if free == 0 {
            std::thread::sleep(Duration::from_millis(2));
            continue;
        }
        match fetch_client.fetch_tasks_raw(&spec.endpoint_id, &token, free, FETCH_TIMEOUT_MS) {
            Ok((raw_tasks, records)) => {
                backoff.reset();
                env.learn_functions(records);
                for raw in raw_tasks {
                    if let Ok(descriptor) = TaskDescriptor::decode(&raw) {
                        events.record(
                            &descriptor.task_id.0,
                            &descriptor.topic,
                            Stage::FetchedByEndpoint,
                        );
                    }
                    counters.outstanding.fetch_add(1, Ordering::SeqCst);
                    if task_tx.send(raw).is_err() {
                        break;
                    }
                }
            }
            Err(RelayError::Auth(e)) => {
                drop(task_tx);
                for w in workers {
                    let _ = w.join();
                }
                let _ = poster.join();
                return Err(EndpointError::Auth(e));
            }
            Err(e) => {
                debug!("fetch retry for {}: {e}", spec.endpoint_id);
                backoff.wait(&shutdown);
            }
        }
    }

    // Graceful drain: no more fetching; in-flight tasks finish and post.
    let drain_deadline = Instant::now() + spec.drain_timeout;
    while counters.outstanding.load(Ordering::SeqCst) > 0 && Instant::now() < drain_deadline {
        std::thread::sleep(Duration::from_millis(10));
    }
    drop(task_tx);
    for w in workers {
        let _ = w.join();
    }
    let _ = poster.join();

    let report = EndpointReport {
        executed: counters.executed.load(Ordering::SeqCst),
        posted: counters.posted.load(Ordering::SeqCst),
        task_errors: counters.task_errors.load(Ordering::SeqCst),
        infra_errors: counters.infra_errors.load(Ordering::SeqCst),
        peak_concurrent: counters.peak_concurrent.load(Ordering::SeqCst),
    };
    info!("endpoint {} drained: {report:?}", spec.endpoint_id);
    Ok(report)
}

/// In-process endpoint for tests and examples.
pub struct EndpointHandle {
    shutdown: Arc<AtomicBool>,
    thread: std::thread::JoinHandle<Result<EndpointReport, EndpointError>>,
}

impl EndpointHandle {
    pub fn spawn(spec: EndpointSpec, events: Arc<EventLog>, out_dir: Option<PathBuf>) -> Self {
        let shutdown = Arc::new(AtomicBool::new(false));
        let flag = Arc::clone(&shutdown);
        let thread = std::thread::Builder::new()
            .name(format!("endpoint-{}", spec.endpoint_id))
            .spawn(move || run_endpoint(spec, events, out_dir, flag))
            .expect("spawn endpoint thread");
        EndpointHandle { shutdown, thread }
    }

    pub fn shutdown_flag(&self) -> Arc<AtomicBool> {
        Arc::clone(&self.shutdown)
    }

    pub fn shutdown_and_join(self) -> Result<EndpointReport, EndpointError> {
        self.shutdown.store(true, Ordering::SeqCst);
        self.thread.join().expect("endpoint thread panicked")
    }
}
