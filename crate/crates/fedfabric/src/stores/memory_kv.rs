//! Networked in-memory KV store: a standalone server speaking a minimal
//! length-prefixed binary protocol over a stream socket, plus a client
//! handle implementing [`ObjectStore`].
//!
//! Request: 1-byte opcode, 16-byte key, `u64` LE payload length, payload.
//! Response: 1-byte status, `u64` LE payload length, payload.
//! Opcodes: 1 PUT, 2 GET, 3 EXISTS, 4 DEL, 5 STATS. The STATS payload is
//! five `u64` LE counters (puts, gets, bytes_in, bytes_out,
//! active_transfers).

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

use log::{debug, warn};
use parking_lot::Mutex;

use crate::clock::Clock;
use crate::refcore::{Key128, ObjectKey, ResolutionRecipe, StoreId, StoreKind};
use crate::stores::{
    NetworkModel, ObjectStore, StatCounters, StoreError, StoreStats, TicketState, TransferTicket,
};

const OP_PUT: u8 = 1;
const OP_GET: u8 = 2;
const OP_EXISTS: u8 = 3;
const OP_DEL: u8 = 4;
const OP_STATS: u8 = 5;

const STATUS_OK: u8 = 0;
const STATUS_NOT_FOUND: u8 = 1;
const STATUS_CAPACITY: u8 = 2;
const STATUS_BAD_REQUEST: u8 = 3;
const STATUS_ERROR: u8 = 4;

const MAX_OBJECT_BYTES: u64 = 1 << 31;

struct ServerState {
    objects: HashMap<Key128, Arc<Vec<u8>>>,
    used_bytes: u64,
}

struct ServerShared {
    state: Mutex<ServerState>,
    stats: StatCounters,
    model: NetworkModel,
    capacity_bytes: u64,
    clock: Clock,
    shutdown: AtomicBool,
}

/// The store server process body. Binds, serves until `shutdown`.
pub struct MemoryKvServer {
    shared: Arc<ServerShared>,
    local_addr: SocketAddr,
    accept_thread: Option<JoinHandle<()>>,
}

impl MemoryKvServer {
    /// Bind `addr` (use port 0 for an ephemeral port) and start serving.
    pub fn start(addr: &str, model: NetworkModel, capacity_bytes: u64) -> std::io::Result<Self> {
        Self::start_with_clock(addr, model, capacity_bytes, Clock::Wall)
    }

    pub fn start_with_clock(
        addr: &str,
        model: NetworkModel,
        capacity_bytes: u64,
        clock: Clock,
    ) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let local_addr = listener.local_addr()?;
        let shared = Arc::new(ServerShared {
            state: Mutex::new(ServerState {
                objects: HashMap::new(),
                used_bytes: 0,
            }),
            stats: StatCounters::default(),
            model,
            capacity_bytes,
            clock,
            shutdown: AtomicBool::new(false),
        });
        let accept_shared = Arc::clone(&shared);
        let accept_thread = std::thread::Builder::new()
            .name("kv-accept".into())
            .spawn(move || accept_loop(listener, accept_shared))?;
        debug!("memory-kv server listening on {local_addr}");
        Ok(MemoryKvServer {
            shared,
            local_addr,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn stats(&self) -> StoreStats {
        self.shared.stats.snapshot()
    }

    pub fn shutdown(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        // Nudge the accept loop out of its blocking accept.
        let _ = TcpStream::connect(self.local_addr);
        if let Some(h) = self.accept_thread.take() {
            let _ = h.join();
        }
    }
}

impl Drop for MemoryKvServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<ServerShared>) {
    for conn in listener.incoming() {
        if shared.shutdown.load(Ordering::SeqCst) {
            return;
        }
        match conn {
            Ok(stream) => {
                let conn_shared = Arc::clone(&shared);
                let _ = std::thread::Builder::new()
                    .name("kv-conn".into())
                    .spawn(move || {
                        if let Err(e) = serve_connection(stream, conn_shared) {
                            debug!("kv connection ended: {e}");
                        }
                    });
            }
            Err(e) => {
                if shared.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                warn!("kv accept error: {e}");
            }
        }
    }
}

fn read_request(stream: &mut TcpStream) -> std::io::Result<(u8, Key128, Vec<u8>)> {
    let mut header = [0u8; 1 + 16 + 8];
    stream.read_exact(&mut header)?;
    let opcode = header[0];
    let key = Key128(header[1..17].try_into().unwrap());
    let len = u64::from_le_bytes(header[17..25].try_into().unwrap());
    if len > MAX_OBJECT_BYTES {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            "request payload too large",
        ));
    }
    let mut payload = vec![0u8; len as usize];
    stream.read_exact(&mut payload)?;
    Ok((opcode, key, payload))
}

fn write_response(stream: &mut TcpStream, status: u8, payload: &[u8]) -> std::io::Result<()> {
    let mut header = [0u8; 9];
    header[0] = status;
    header[1..9].copy_from_slice(&(payload.len() as u64).to_le_bytes());
    stream.write_all(&header)?;
    stream.write_all(payload)?;
    stream.flush()
}

fn serve_connection(mut stream: TcpStream, shared: Arc<ServerShared>) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    loop {
        let (opcode, key, payload) = match read_request(&mut stream) {
            Ok(req) => req,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(e),
        };
        match opcode {
            OP_PUT => {
                shared
                    .clock
                    .sleep_ms(ms(shared.model.op_latency_ns(payload.len() as u64)));
                let mut st = shared.state.lock();
                let len = payload.len() as u64;
                if st.used_bytes + len > shared.capacity_bytes {
                    drop(st);
                    write_response(&mut stream, STATUS_CAPACITY, &[])?;
                    continue;
                }
                if let Some(old) = st.objects.insert(key, Arc::new(payload)) {
                    st.used_bytes -= old.len() as u64;
                }
                st.used_bytes += len;
                drop(st);
                shared.stats.record_put(len);
                write_response(&mut stream, STATUS_OK, &[])?;
            }
            OP_GET => {
                let obj = shared.state.lock().objects.get(&key).cloned();
                match obj {
                    Some(bytes) => {
                        shared
                            .clock
                            .sleep_ms(ms(shared.model.op_latency_ns(bytes.len() as u64)));
                        shared.stats.record_get(bytes.len() as u64);
                        write_response(&mut stream, STATUS_OK, &bytes)?;
                    }
                    None => {
                        shared.clock.sleep_ms(shared.model.request_latency_ms);
                        write_response(&mut stream, STATUS_NOT_FOUND, &[])?;
                    }
                }
            }
            OP_EXISTS => {
                shared.clock.sleep_ms(shared.model.request_latency_ms);
                let present = shared.state.lock().objects.contains_key(&key);
                write_response(&mut stream, STATUS_OK, &[present as u8])?;
            }
            OP_DEL => {
                shared.clock.sleep_ms(shared.model.request_latency_ms);
                let mut st = shared.state.lock();
                match st.objects.remove(&key) {
                    Some(old) => {
                        st.used_bytes -= old.len() as u64;
                        drop(st);
                        write_response(&mut stream, STATUS_OK, &[])?;
                    }
                    None => {
                        drop(st);
                        write_response(&mut stream, STATUS_NOT_FOUND, &[])?;
                    }
                }
            }
            OP_STATS => {
                let s = shared.stats.snapshot();
                let mut payload = Vec::with_capacity(40);
                for v in [s.puts, s.gets, s.bytes_in, s.bytes_out, s.active_transfers] {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
                write_response(&mut stream, STATUS_OK, &payload)?;
            }
            _ => write_response(&mut stream, STATUS_BAD_REQUEST, &[])?,
        }
    }
}

fn ms(ns: u64) -> f64 {
    ns as f64 / 1e6
}

/// Client handle to a memory-kv server. Reconnects lazily; requests on one
/// handle are serialized, so clone handles (or open several) for
/// concurrency.
pub struct MemoryKvClient {
    store_id: StoreId,
    address: String,
    conn: Mutex<Option<TcpStream>>,
    tickets: Mutex<HashMap<Key128, TransferTicket>>,
}

impl MemoryKvClient {
    pub fn new(store_id: StoreId, address: String) -> Self {
        Self {
            store_id,
            address,
            conn: Mutex::new(None),
            tickets: Mutex::new(HashMap::new()),
        }
    }

    fn unavailable(&self, e: &std::io::Error) -> StoreError {
        StoreError::Unavailable {
            store: self.store_id.0.clone(),
            detail: e.to_string(),
        }
    }

    fn request(&self, opcode: u8, key: Key128, payload: &[u8]) -> Result<(u8, Vec<u8>), StoreError> {
        let mut guard = self.conn.lock();
        // One reconnect attempt per request: a dead pooled connection is
        // indistinguishable from a dead server until we retry.
        for attempt in 0..2 {
            if guard.is_none() {
                match TcpStream::connect(&self.address) {
                    Ok(s) => {
                        let _ = s.set_nodelay(true);
                        *guard = Some(s);
                    }
                    Err(e) => {
                        if attempt == 1 {
                            return Err(self.unavailable(&e));
                        }
                        continue;
                    }
                }
            }
            let stream = guard.as_mut().unwrap();
            let outcome = (|| -> std::io::Result<(u8, Vec<u8>)> {
                let mut msg = Vec::with_capacity(25 + payload.len());
                msg.push(opcode);
                msg.extend_from_slice(&key.0);
                msg.extend_from_slice(&(payload.len() as u64).to_le_bytes());
                msg.extend_from_slice(payload);
                stream.write_all(&msg)?;
                stream.flush()?;
                let mut header = [0u8; 9];
                stream.read_exact(&mut header)?;
                let status = header[0];
                let len = u64::from_le_bytes(header[1..9].try_into().unwrap());
                if len > MAX_OBJECT_BYTES {
                    return Err(std::io::Error::new(
                        std::io::ErrorKind::InvalidData,
                        "oversized response",
                    ));
                }
                let mut body = vec![0u8; len as usize];
                stream.read_exact(&mut body)?;
                Ok((status, body))
            })();
            match outcome {
                Ok(resp) => return Ok(resp),
                Err(e) => {
                    *guard = None;
                    if attempt == 1 {
                        return Err(self.unavailable(&e));
                    }
                }
            }
        }
        unreachable!("request loop always returns within two attempts")
    }

    fn key_error(&self, status: u8, key: &Key128) -> StoreError {
        match status {
            STATUS_NOT_FOUND => StoreError::NotFound {
                store: self.store_id.0.clone(),
                key: key.to_hex(),
            },
            STATUS_CAPACITY => StoreError::CapacityExceeded {
                store: self.store_id.0.clone(),
                size: 0,
            },
            STATUS_ERROR | STATUS_BAD_REQUEST | _ => StoreError::Protocol {
                store: self.store_id.0.clone(),
                detail: format!("server status {status}"),
            },
        }
    }

    /// Server-side counters, fetched with a STATS request.
    pub fn server_stats(&self) -> Result<StoreStats, StoreError> {
        let (status, body) = self.request(OP_STATS, Key128([0; 16]), &[])?;
        if status != STATUS_OK || body.len() != 40 {
            return Err(self.key_error(status, &Key128([0; 16])));
        }
        let word = |i: usize| u64::from_le_bytes(body[i * 8..(i + 1) * 8].try_into().unwrap());
        Ok(StoreStats {
            puts: word(0),
            gets: word(1),
            bytes_in: word(2),
            bytes_out: word(3),
            active_transfers: word(4),
        })
    }
}

impl ObjectStore for MemoryKvClient {
    fn store_id(&self) -> &StoreId {
        &self.store_id
    }

    fn kind(&self) -> StoreKind {
        StoreKind::MemoryKv
    }

    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<TransferTicket, StoreError> {
        if key.size_bytes != data.len() as u64 {
            return Err(StoreError::SizeMismatch {
                key: key.key.to_hex(),
                declared: key.size_bytes,
                actual: data.len() as u64,
            });
        }
        let enqueue = crate::clock::monotonic_ns();
        let (status, _) = self.request(OP_PUT, key.key, data)?;
        if status != STATUS_OK {
            return Err(match status {
                STATUS_CAPACITY => StoreError::CapacityExceeded {
                    store: self.store_id.0.clone(),
                    size: key.size_bytes,
                },
                s => self.key_error(s, &key.key),
            });
        }
        let done = crate::clock::monotonic_ns();
        let ticket = TransferTicket {
            key: key.key,
            size_bytes: key.size_bytes,
            state: TicketState::Done,
            enqueue_ns: enqueue,
            start_ns: Some(enqueue),
            completion_ns: Some(done),
            failure: None,
        };
        self.tickets.lock().insert(key.key, ticket.clone());
        Ok(ticket)
    }

    fn get(&self, key: &ObjectKey) -> Result<Vec<u8>, StoreError> {
        let (status, body) = self.request(OP_GET, key.key, &[])?;
        if status != STATUS_OK {
            return Err(self.key_error(status, &key.key));
        }
        Ok(body)
    }

    fn exists(&self, key: &ObjectKey) -> Result<bool, StoreError> {
        let (status, body) = self.request(OP_EXISTS, key.key, &[])?;
        if status != STATUS_OK || body.len() != 1 {
            return Err(self.key_error(status, &key.key));
        }
        Ok(body[0] == 1)
    }

    fn delete(&self, key: &ObjectKey) -> Result<(), StoreError> {
        let (status, _) = self.request(OP_DEL, key.key, &[])?;
        match status {
            STATUS_OK | STATUS_NOT_FOUND => Ok(()),
            s => Err(self.key_error(s, &key.key)),
        }
    }

    fn stats(&self) -> StoreStats {
        self.server_stats().unwrap_or_default()
    }

    fn ticket(&self, key: &ObjectKey) -> Option<TransferTicket> {
        self.tickets.lock().get(&key.key).cloned()
    }

    fn recipe(&self) -> ResolutionRecipe {
        ResolutionRecipe::new(StoreKind::MemoryKv, &self.store_id)
            .with_param(ResolutionRecipe::PARAM_ADDRESS, &self.address)
    }
}
