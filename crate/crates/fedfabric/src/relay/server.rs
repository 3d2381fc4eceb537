//! Relay server: accept loop, per-connection handlers, tiered persistence
//! latency, lease-based redelivery, and first-wins result acceptance.

use std::collections::{HashMap, VecDeque};
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use log::{debug, warn};
use parking_lot::{Condvar, Mutex};
use rand::RngCore;

use crate::clock::monotonic_ns;
use crate::relay::protocol::{MessageType, Status, FRAME_LIMIT};
use crate::relay::{
    EndpointId, FunctionId, FunctionRecord, TaskDescriptor, TaskId, Tier, TierPolicy,
};
use crate::wire::{self, read_frame, KvMap, Reader};

const SWEEP_INTERVAL: Duration = Duration::from_millis(200);
const ACCEPT_POLL: Duration = Duration::from_millis(2);

struct StoredTask {
    seq: u64,
    task_id: TaskId,
    function_id: FunctionId,
    bytes: Arc<Vec<u8>>,
    payload_len: u64,
    tier: Tier,
}

struct InFlight {
    task: Arc<StoredTask>,
    lease_deadline_ns: u64,
}

#[derive(Default)]
struct EndpointState {
    token: Option<[u8; 32]>,
    queue: VecDeque<Arc<StoredTask>>,
    in_flight: HashMap<TaskId, InFlight>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TaskPhase {
    Queued,
    InFlight,
    Completed,
}

struct StoredResult {
    bytes: Arc<Vec<u8>>,
    tier: Tier,
}

#[derive(Default)]
struct State {
    functions_by_id: HashMap<FunctionId, FunctionRecord>,
    functions_by_body: HashMap<(String, String, Vec<u8>), FunctionId>,
    endpoints: HashMap<EndpointId, EndpointState>,
    task_index: HashMap<TaskId, (EndpointId, TaskPhase)>,
    results: HashMap<TaskId, StoredResult>,
    submitted: u64,
    rejected: u64,
    completed: u64,
    seq: u64,
}

struct Shared {
    state: Mutex<State>,
    cv: Condvar,
    tiers: TierPolicy,
    lease_timeout_ms: u64,
    shutdown: AtomicBool,
    paused: AtomicBool,
    conns: Mutex<Vec<TcpStream>>,
}

/// Counter snapshot exposed through STATS.
///
/// Conservation: `submitted == queued + in_flight + completed + rejected`
/// at every snapshot (submitted counts every submission attempt).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RelayStatsSnapshot {
    pub submitted: u64,
    pub rejected: u64,
    pub queued: u64,
    pub in_flight: u64,
    pub completed: u64,
    pub functions: u64,
}

/// A running relay. Dropping it shuts the listener and worker threads down.
pub struct RelayServer {
    shared: Arc<Shared>,
    listener: Arc<Mutex<Option<TcpListener>>>,
    local_addr: SocketAddr,
    threads: Vec<std::thread::JoinHandle<()>>,
}

impl RelayServer {
    pub fn start(
        addr: &str,
        tiers: TierPolicy,
        lease_timeout_ms: u64,
    ) -> std::io::Result<RelayServer> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let local_addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            state: Mutex::new(State::default()),
            cv: Condvar::new(),
            tiers,
            lease_timeout_ms,
            shutdown: AtomicBool::new(false),
            paused: AtomicBool::new(false),
            conns: Mutex::new(Vec::new()),
        });
        let listener = Arc::new(Mutex::new(Some(listener)));

        let mut threads = Vec::new();
        {
            let shared = Arc::clone(&shared);
            let listener = Arc::clone(&listener);
            threads.push(
                std::thread::Builder::new()
                    .name("relay-accept".into())
                    .spawn(move || accept_loop(shared, listener))?,
            );
        }
        {
            let shared = Arc::clone(&shared);
            threads.push(
                std::thread::Builder::new()
                    .name("relay-sweeper".into())
                    .spawn(move || lease_sweeper(shared))?,
            );
        }
        debug!("relay listening on {local_addr}");
        Ok(RelayServer {
            shared,
            listener,
            local_addr,
            threads,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    /// Simulate a relay outage: stop accepting and sever open connections.
    /// State is retained; `resume` brings the same relay back.
    pub fn pause(&self) {
        self.shared.paused.store(true, Ordering::SeqCst);
        *self.listener.lock() = None;
        for conn in self.shared.conns.lock().drain(..) {
            let _ = conn.shutdown(std::net::Shutdown::Both);
        }
    }

    pub fn resume(&self) -> std::io::Result<()> {
        let listener = TcpListener::bind(self.local_addr)?;
        listener.set_nonblocking(true)?;
        *self.listener.lock() = Some(listener);
        self.shared.paused.store(false, Ordering::SeqCst);
        Ok(())
    }

    pub fn stats(&self) -> RelayStatsSnapshot {
        snapshot(&self.shared.state.lock())
    }

    pub fn shutdown(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.cv.notify_all();
        for conn in self.shared.conns.lock().drain(..) {
            let _ = conn.shutdown(std::net::Shutdown::Both);
        }
        *self.listener.lock() = None;
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for RelayServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn snapshot(st: &State) -> RelayStatsSnapshot {
    RelayStatsSnapshot {
        submitted: st.submitted,
        rejected: st.rejected,
        queued: st.endpoints.values().map(|e| e.queue.len() as u64).sum(),
        in_flight: st.endpoints.values().map(|e| e.in_flight.len() as u64).sum(),
        completed: st.completed,
        functions: st.functions_by_id.len() as u64,
    }
}

fn accept_loop(shared: Arc<Shared>, listener: Arc<Mutex<Option<TcpListener>>>) {
    loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            return;
        }
        let accepted = {
            let guard = listener.lock();
            match guard.as_ref() {
                Some(l) => l.accept(),
                None => {
                    drop(guard);
                    std::thread::sleep(ACCEPT_POLL);
                    continue;
                }
            }
        };
        match accepted {
            Ok((stream, _peer)) => {
                let _ = stream.set_nodelay(true);
                if let Ok(clone) = stream.try_clone() {
                    shared.conns.lock().push(clone);
                }
                let conn_shared = Arc::clone(&shared);
                let _ = std::thread::Builder::new()
                    .name("relay-conn".into())
                    .spawn(move || {
                        if let Err(e) = serve_connection(stream, conn_shared) {
                            debug!("relay connection ended: {e}");
                        }
                    });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => {
                std::thread::sleep(ACCEPT_POLL);
            }
            Err(e) => {
                if !shared.shutdown.load(Ordering::SeqCst) {
                    warn!("relay accept error: {e}");
                }
                std::thread::sleep(ACCEPT_POLL);
            }
        }
    }
}

fn lease_sweeper(shared: Arc<Shared>) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        std::thread::sleep(SWEEP_INTERVAL);
        let now = monotonic_ns();
        let mut st = shared.state.lock();
        let mut requeued = 0usize;
        let mut index_updates: Vec<TaskId> = Vec::new();
        for ep in st.endpoints.values_mut() {
            let expired: Vec<TaskId> = ep
                .in_flight
                .iter()
                .filter(|(_, f)| f.lease_deadline_ns <= now)
                .map(|(id, _)| id.clone())
                .collect();
            let mut tasks: Vec<Arc<StoredTask>> = expired
                .iter()
                .filter_map(|id| ep.in_flight.remove(id).map(|f| f.task))
                .collect();
            // Redelivered tasks go to the queue front, oldest first, so
            // original submission order is preserved as closely as possible.
            tasks.sort_by_key(|t| std::cmp::Reverse(t.seq));
            for t in tasks {
                index_updates.push(t.task_id.clone());
                ep.queue.push_front(t);
                requeued += 1;
            }
        }
        for id in index_updates {
            if let Some(entry) = st.task_index.get_mut(&id) {
                entry.1 = TaskPhase::Queued;
            }
        }
        if requeued > 0 {
            debug!("lease sweeper requeued {requeued} tasks");
            shared.cv.notify_all();
        }
    }
}

fn serve_connection(mut stream: TcpStream, shared: Arc<Shared>) -> std::io::Result<()> {
    stream.set_read_timeout(Some(Duration::from_secs(300)))?;
    loop {
        let body = match read_frame(&mut stream, FRAME_LIMIT) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        if shared.shutdown.load(Ordering::SeqCst) {
            return Ok(());
        }
        let (status, resp) = match dispatch(&shared, &body) {
            Ok(pair) => pair,
            Err(e) => {
                debug!("malformed relay request: {e}");
                (Status::Error, Vec::new())
            }
        };
        let mut frame = Vec::with_capacity(resp.len() + 1);
        frame.push(status as u8);
        frame.extend_from_slice(&resp);
        let mut out = Vec::with_capacity(frame.len() + 4);
        out.extend_from_slice(&(frame.len() as u32).to_le_bytes());
        out.extend_from_slice(&frame);
        stream.write_all(&out)?;
        stream.flush()?;
    }
}

fn dispatch(shared: &Arc<Shared>, body: &[u8]) -> Result<(Status, Vec<u8>), crate::wire::WireError> {
    let mut r = Reader::new(body);
    let msg_type = MessageType::from_code(r.u8()?)?;
    Ok(match msg_type {
        MessageType::Register => handle_register(shared, &mut r)?,
        MessageType::Submit => handle_submit(shared, &mut r)?,
        MessageType::Fetch => handle_fetch(shared, &mut r)?,
        MessageType::PostResult => handle_post_result(shared, &mut r)?,
        MessageType::GetResult => handle_get_result(shared, &mut r)?,
        MessageType::Stats => handle_stats(shared),
        MessageType::Pair => handle_pair(shared, &mut r)?,
    })
}

fn kv_body<'a, I>(pairs: I) -> Vec<u8>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    let mut buf = Vec::new();
    wire::put_kv_pairs(&mut buf, pairs);
    buf
}

fn handle_register(
    shared: &Arc<Shared>,
    r: &mut Reader,
) -> Result<(Status, Vec<u8>), crate::wire::WireError> {
    let kv = KvMap::new(r.kv_pairs()?);
    let name = kv.require("name")?.to_owned();
    let builtin = kv.require("builtin")?.to_owned();
    let params = r.blob()?.to_vec();
    if name.is_empty() {
        return Ok((Status::Error, Vec::new()));
    }
    let mut st = shared.state.lock();
    let body_key = (name.clone(), builtin.clone(), params.clone());
    let id = match st.functions_by_body.get(&body_key) {
        Some(id) => id.clone(),
        None => {
            let mut raw = [0u8; 16];
            rand::thread_rng().fill_bytes(&mut raw);
            let id = FunctionId(hex::encode(raw));
            st.functions_by_body.insert(body_key, id.clone());
            st.functions_by_id.insert(
                id.clone(),
                FunctionRecord {
                    function_id: id.clone(),
                    name,
                    builtin,
                    params,
                },
            );
            id
        }
    };
    Ok((Status::Ok, kv_body([("function_id", id.0.as_str())])))
}

fn handle_submit(
    shared: &Arc<Shared>,
    r: &mut Reader,
) -> Result<(Status, Vec<u8>), crate::wire::WireError> {
    let kv = KvMap::new(r.kv_pairs()?);
    let task_id = TaskId(kv.require("task_id")?.to_owned());
    let function_id = FunctionId(kv.require("function_id")?.to_owned());
    let endpoint_id = EndpointId(kv.require("endpoint_id")?.to_owned());
    let topic = kv.require("topic")?.to_owned();
    let created_ns = kv.require_u64("created_ns")?;
    let payload_bytes = r.blob()?;
    let payload_len = payload_bytes.len() as u64;

    {
        let mut st = shared.state.lock();
        st.submitted += 1;
        if !st.functions_by_id.contains_key(&function_id) {
            st.rejected += 1;
            return Ok((Status::UnknownFunction, Vec::new()));
        }
        if !shared.tiers.accepts(payload_len) {
            st.rejected += 1;
            return Ok((Status::PayloadTooLarge, Vec::new()));
        }
    }

    let tier = shared.tiers.tier_for(payload_len);
    // Persist into the tier: the latency model is charged before the task
    // becomes fetchable, with no lock held.
    std::thread::sleep(Duration::from_secs_f64(
        shared.tiers.tier_latency_ms(tier, payload_len) / 1e3,
    ));

    let payload = crate::refcore::TaskPayload::decode(payload_bytes)?;
    let descriptor = TaskDescriptor {
        task_id: task_id.clone(),
        function_id,
        endpoint_id: endpoint_id.clone(),
        topic,
        payload,
        created_ns,
        tier: Some(tier),
    };
    let bytes = Arc::new(descriptor.encode());

    let mut st = shared.state.lock();
    st.seq += 1;
    let stored = Arc::new(StoredTask {
        seq: st.seq,
        task_id: task_id.clone(),
        function_id: descriptor.function_id.clone(),
        bytes,
        payload_len,
        tier,
    });
    st.task_index
        .insert(task_id.clone(), (endpoint_id.clone(), TaskPhase::Queued));
    st.endpoints.entry(endpoint_id).or_default().queue.push_back(stored);
    drop(st);
    shared.cv.notify_all();
    Ok((
        Status::Ok,
        kv_body([("task_id", task_id.0.as_str()), ("tier", tier.as_str())]),
    ))
}

fn check_auth(st: &State, endpoint_id: &EndpointId, token_hex: &str) -> bool {
    let Some(ep) = st.endpoints.get(endpoint_id) else {
        return false;
    };
    let Some(expected) = ep.token else {
        return false;
    };
    match hex::decode(token_hex) {
        Ok(bytes) => bytes.as_slice() == expected.as_slice(),
        Err(_) => false,
    }
}

fn handle_fetch(
    shared: &Arc<Shared>,
    r: &mut Reader,
) -> Result<(Status, Vec<u8>), crate::wire::WireError> {
    let kv = KvMap::new(r.kv_pairs()?);
    let endpoint_id = EndpointId(kv.require("endpoint_id")?.to_owned());
    let token = kv.require("token")?;
    let max_n = kv.require_u64("max_n")?.clamp(1, 64) as usize;
    let timeout_ms = kv.require_u64("timeout_ms")?.min(120_000);
    let deadline = monotonic_ns() + timeout_ms * 1_000_000;

    let taken: Vec<Arc<StoredTask>> = {
        let mut st = shared.state.lock();
        if !check_auth(&st, &endpoint_id, token) {
            return Ok((Status::Auth, Vec::new()));
        }
        loop {
            let lease_ns = shared.lease_timeout_ms * 1_000_000;
            let now = monotonic_ns();
            let ep = st.endpoints.entry(endpoint_id.clone()).or_default();
            if !ep.queue.is_empty() {
                let mut out = Vec::new();
                while out.len() < max_n {
                    let Some(task) = ep.queue.pop_front() else { break };
                    ep.in_flight.insert(
                        task.task_id.clone(),
                        InFlight {
                            task: Arc::clone(&task),
                            lease_deadline_ns: now + lease_ns,
                        },
                    );
                    out.push(task);
                }
                for t in &out {
                    if let Some(entry) = st.task_index.get_mut(&t.task_id) {
                        entry.1 = TaskPhase::InFlight;
                    }
                }
                break out;
            }
            let now = monotonic_ns();
            if now >= deadline || shared.shutdown.load(Ordering::SeqCst) {
                break Vec::new();
            }
            shared
                .cv
                .wait_for(&mut st, Duration::from_nanos(deadline - now));
        }
    };

    // Tier read latency per delivered payload, charged outside the lock.
    for t in &taken {
        std::thread::sleep(Duration::from_secs_f64(
            shared.tiers.tier_latency_ms(t.tier, t.payload_len) / 1e3,
        ));
    }

    // Ship the function bodies used by this batch so the endpoint can
    // instantiate implementations without another round trip.
    let mut function_ids: Vec<FunctionId> = taken.iter().map(|t| t.function_id.clone()).collect();
    function_ids.sort();
    function_ids.dedup();
    let records: Vec<FunctionRecord> = {
        let st = shared.state.lock();
        function_ids
            .iter()
            .filter_map(|id| st.functions_by_id.get(id).cloned())
            .collect()
    };

    let mut body = Vec::new();
    wire::put_u16(&mut body, taken.len() as u16);
    for t in &taken {
        wire::put_blob(&mut body, &t.bytes);
    }
    wire::put_u16(&mut body, records.len() as u16);
    for rec in &records {
        wire::put_kv_pairs(
            &mut body,
            [
                ("function_id", rec.function_id.0.as_str()),
                ("name", rec.name.as_str()),
                ("builtin", rec.builtin.as_str()),
            ],
        );
        wire::put_blob(&mut body, &rec.params);
    }
    Ok((Status::Ok, body))
}

fn handle_post_result(
    shared: &Arc<Shared>,
    r: &mut Reader,
) -> Result<(Status, Vec<u8>), crate::wire::WireError> {
    let kv = KvMap::new(r.kv_pairs()?);
    let endpoint_id = EndpointId(kv.require("endpoint_id")?.to_owned());
    let token = kv.require("token")?;
    let task_id = TaskId(kv.require("task_id")?.to_owned());
    let payload_len = kv.require_u64("payload_len")?;
    let envelope_bytes = r.blob()?.to_vec();

    {
        let st = shared.state.lock();
        if !check_auth(&st, &endpoint_id, token) {
            return Ok((Status::Auth, Vec::new()));
        }
        if !st.task_index.contains_key(&task_id) {
            return Ok((Status::UnknownTask, Vec::new()));
        }
        if st.results.contains_key(&task_id) {
            // Duplicate post: first result won, ack idempotently.
            return Ok((Status::Ok, kv_body([("duplicate", "1")])));
        }
    }

    let tier = shared.tiers.tier_for(payload_len);
    std::thread::sleep(Duration::from_secs_f64(
        shared.tiers.tier_latency_ms(tier, payload_len) / 1e3,
    ));

    let mut st = shared.state.lock();
    if st.results.contains_key(&task_id) {
        return Ok((Status::Ok, kv_body([("duplicate", "1")])));
    }
    st.results.insert(
        task_id.clone(),
        StoredResult {
            bytes: Arc::new(envelope_bytes),
            tier,
        },
    );
    // Acknowledge: drop the task from wherever it currently lives, covering
    // late posts for tasks that were already requeued for redelivery.
    for ep in st.endpoints.values_mut() {
        ep.in_flight.remove(&task_id);
        ep.queue.retain(|t| t.task_id != task_id);
    }
    if let Some(entry) = st.task_index.get_mut(&task_id) {
        entry.1 = TaskPhase::Completed;
    }
    st.completed += 1;
    drop(st);
    shared.cv.notify_all();
    Ok((Status::Ok, kv_body([("duplicate", "0")])))
}

fn handle_get_result(
    shared: &Arc<Shared>,
    r: &mut Reader,
) -> Result<(Status, Vec<u8>), crate::wire::WireError> {
    let kv = KvMap::new(r.kv_pairs()?);
    let task_id = TaskId(kv.require("task_id")?.to_owned());
    let timeout_ms = kv.require_u64("timeout_ms")?.min(120_000);
    let deadline = monotonic_ns() + timeout_ms * 1_000_000;

    let found = {
        let mut st = shared.state.lock();
        if !st.task_index.contains_key(&task_id) {
            return Ok((Status::UnknownTask, Vec::new()));
        }
        loop {
            if let Some(res) = st.results.get(&task_id) {
                break Some((Arc::clone(&res.bytes), res.tier));
            }
            let now = monotonic_ns();
            if now >= deadline || shared.shutdown.load(Ordering::SeqCst) {
                break None;
            }
            shared
                .cv
                .wait_for(&mut st, Duration::from_nanos(deadline - now));
        }
    };

    match found {
        Some((bytes, tier)) => {
            std::thread::sleep(Duration::from_secs_f64(
                shared.tiers.tier_latency_ms(tier, bytes.len() as u64) / 1e3,
            ));
            let mut body = Vec::new();
            wire::put_blob(&mut body, &bytes);
            Ok((Status::Ok, body))
        }
        None => Ok((Status::Pending, Vec::new())),
    }
}

fn handle_stats(shared: &Arc<Shared>) -> (Status, Vec<u8>) {
    let snap = snapshot(&shared.state.lock());
    let now = monotonic_ns().to_string();
    let vals: Vec<String> = [
        snap.submitted,
        snap.rejected,
        snap.queued,
        snap.in_flight,
        snap.completed,
        snap.functions,
    ]
    .iter()
    .map(|v| v.to_string())
    .collect();
    (
        Status::Ok,
        kv_body([
            ("submitted", vals[0].as_str()),
            ("rejected", vals[1].as_str()),
            ("queued", vals[2].as_str()),
            ("in_flight", vals[3].as_str()),
            ("completed", vals[4].as_str()),
            ("functions", vals[5].as_str()),
            ("server_time_ns", now.as_str()),
        ]),
    )
}

fn handle_pair(
    shared: &Arc<Shared>,
    r: &mut Reader,
) -> Result<(Status, Vec<u8>), crate::wire::WireError> {
    let kv = KvMap::new(r.kv_pairs()?);
    let endpoint_id = EndpointId(kv.require("endpoint_id")?.to_owned());
    let mut token = [0u8; 32];
    rand::thread_rng().fill_bytes(&mut token);
    let mut st = shared.state.lock();
    st.endpoints.entry(endpoint_id).or_default().token = Some(token);
    let token_hex = hex::encode(token);
    Ok((Status::Ok, kv_body([("token", token_hex.as_str())])))
}
