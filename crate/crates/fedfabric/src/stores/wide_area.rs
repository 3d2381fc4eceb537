//! Simulated wide-area transfer store.
//!
//! A put stages the bytes under the shared root and enqueues a transfer;
//! the transfer progresses in the background under FIFO admission with at
//! most `max_concurrent_transfers` active, then the object lands atomically
//! in the destination directory. A get blocks until the object's transfer
//! is done. Reads of already-transferred objects are plain local-disk reads:
//! the fixed request cost models transfer initiation, not data access.
//!
//! Layout: `<root>/<store_id>/staging/<key>` and
//! `<root>/<store_id>/objects/<key>` (+ `.meta` sidecar). A second process
//! rooted at the same directory sees objects as their transfers complete.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use log::debug;
use parking_lot::{Condvar, Mutex};

use crate::clock::Clock;
use crate::refcore::{Key128, ObjectKey, ResolutionRecipe, StoreId, StoreKind};
use crate::stores::{
    NetworkModel, ObjectStore, StatCounters, StoreError, StoreStats, TicketState,
    TransferScheduler, TransferTicket,
};

/// How long a remote get polls the shared directory before giving up.
const REMOTE_GET_TIMEOUT: Duration = Duration::from_secs(120);
const REMOTE_POLL_INTERVAL: Duration = Duration::from_millis(2);

struct WanState {
    scheduler: TransferScheduler,
    tickets: HashMap<Key128, TransferTicket>,
}

struct Shared {
    state: Mutex<WanState>,
    cv: Condvar,
    stats: StatCounters,
    shutdown: AtomicBool,
}

pub struct WideAreaStore {
    store_id: StoreId,
    root: PathBuf,
    staging: PathBuf,
    objects: PathBuf,
    model: NetworkModel,
    capacity_bytes: u64,
    clock: Clock,
    shared: Arc<Shared>,
    used_bytes: Mutex<u64>,
    driver: Mutex<Option<std::thread::JoinHandle<()>>>,
}

impl WideAreaStore {
    pub fn open(
        store_id: StoreId,
        root: PathBuf,
        model: NetworkModel,
        capacity_bytes: u64,
        clock: Clock,
    ) -> Result<Self, StoreError> {
        let base = root.join(&store_id.0);
        let staging = base.join("staging");
        let objects = base.join("objects");
        for d in [&staging, &objects] {
            fs::create_dir_all(d).map_err(|e| StoreError::Io {
                store: store_id.0.clone(),
                detail: format!("creating {}: {e}", d.display()),
            })?;
        }
        let shared = Arc::new(Shared {
            state: Mutex::new(WanState {
                scheduler: TransferScheduler::new(model.clone()),
                tickets: HashMap::new(),
            }),
            cv: Condvar::new(),
            stats: StatCounters::default(),
            shutdown: AtomicBool::new(false),
        });
        let store = Self {
            store_id,
            root,
            staging,
            objects,
            model,
            capacity_bytes,
            clock: clock.clone(),
            shared,
            used_bytes: Mutex::new(0),
            driver: Mutex::new(None),
        };
        if !clock.is_virtual() {
            store.spawn_driver();
        }
        Ok(store)
    }

    fn spawn_driver(&self) {
        let shared = Arc::clone(&self.shared);
        let staging = self.staging.clone();
        let objects = self.objects.clone();
        let store_id = self.store_id.0.clone();
        let handle = std::thread::Builder::new()
            .name(format!("wan-driver-{store_id}"))
            .spawn(move || loop {
                let mut st = shared.state.lock();
                if shared.shutdown.load(Ordering::SeqCst) {
                    return;
                }
                let now = crate::clock::monotonic_ns();
                drive_completions(&mut st, now, &staging, &objects);
                shared.stats.set_active_transfers(st.scheduler.active_count() as u64);
                let wake = st.scheduler.next_completion_ns();
                shared.cv.notify_all();
                match wake {
                    Some(t) if t > now => {
                        let timeout = Duration::from_nanos(t - now);
                        shared.cv.wait_for(&mut st, timeout);
                    }
                    Some(_) => {} // more completions due immediately
                    None => {
                        shared.cv.wait_for(&mut st, Duration::from_millis(200));
                    }
                }
            })
            .expect("spawning wide-area driver thread");
        *self.driver.lock() = Some(handle);
    }

    /// Virtual-clock driver: replay completions up to `now` and, if `target`
    /// names an unfinished ticket, jump the clock to its completion.
    fn drive_virtual(&self, target: Option<Key128>) {
        let mut st = self.shared.state.lock();
        loop {
            let now = self.clock.now_ns();
            drive_completions(&mut st, now, &self.staging, &self.objects);
            let Some(key) = target else { break };
            match st.tickets.get(&key) {
                Some(t) if t.is_terminal() => break,
                _ => {}
            }
            let Some(next) = st.scheduler.next_completion_ns() else {
                break;
            };
            self.clock.advance_to(next);
        }
        self.shared
            .stats
            .set_active_transfers(st.scheduler.active_count() as u64);
    }

    fn staged_path(&self, key: &Key128) -> PathBuf {
        self.staging.join(key.to_hex())
    }

    fn object_path(&self, key: &Key128) -> PathBuf {
        self.objects.join(key.to_hex())
    }

    fn io_err(&self, what: &str, e: std::io::Error) -> StoreError {
        StoreError::Io {
            store: self.store_id.0.clone(),
            detail: format!("{what}: {e}"),
        }
    }

    /// Peak simultaneous active transfers seen by this handle's scheduler.
    pub fn peak_active_transfers(&self) -> usize {
        self.shared.state.lock().scheduler.peak_active()
    }

    fn read_done_object(&self, key: &ObjectKey) -> Result<Vec<u8>, StoreError> {
        fs::read(self.object_path(&key.key))
            .map_err(|e| self.io_err("reading transferred object", e))
    }
}

/// Finalize every transfer whose completion time has arrived: the staged
/// file is renamed into the destination directory and the ticket flips to
/// done (or failed if the staged bytes vanished).
fn drive_completions(st: &mut WanState, now_ns: u64, staging: &PathBuf, objects: &PathBuf) {
    let mut finished: Vec<(Key128, u64)> = Vec::new();
    let mut started: Vec<(Key128, u64, u64)> = Vec::new();
    st.scheduler.advance_to(
        now_ns,
        |k, at| finished.push((k, at)),
        |k, at, until| started.push((k, at, until)),
    );
    for (key, start, planned) in started {
        if let Some(t) = st.tickets.get_mut(&key) {
            t.state = TicketState::Active;
            t.start_ns = Some(start);
            t.completion_ns = Some(planned);
        }
    }
    for (key, at) in finished {
        let src = staging.join(key.to_hex());
        let dst = objects.join(key.to_hex());
        let outcome = fs::rename(&src, &dst);
        if let Some(t) = st.tickets.get_mut(&key) {
            match outcome {
                Ok(()) => {
                    t.state = TicketState::Done;
                    t.completion_ns = Some(at);
                    let meta = format!(
                        "size={}\nenqueue_ns={}\nstart_ns={}\ncompletion_ns={}\nstate=done\n",
                        t.size_bytes,
                        t.enqueue_ns,
                        t.start_ns.unwrap_or(t.enqueue_ns),
                        at,
                    );
                    let _ = fs::write(objects.join(format!("{}.meta", key.to_hex())), meta);
                }
                Err(e) => {
                    debug!("wide-area finalize failed for {key}: {e}");
                    t.state = TicketState::Failed;
                    t.failure = Some(e.to_string());
                }
            }
        }
    }
}

impl ObjectStore for WideAreaStore {
    fn store_id(&self) -> &StoreId {
        &self.store_id
    }

    fn kind(&self) -> StoreKind {
        StoreKind::WideArea
    }

    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<TransferTicket, StoreError> {
        if key.size_bytes != data.len() as u64 {
            return Err(StoreError::SizeMismatch {
                key: key.key.to_hex(),
                declared: key.size_bytes,
                actual: data.len() as u64,
            });
        }
        {
            let mut used = self.used_bytes.lock();
            if *used + key.size_bytes > self.capacity_bytes {
                return Err(StoreError::CapacityExceeded {
                    store: self.store_id.0.clone(),
                    size: key.size_bytes,
                });
            }
            *used += key.size_bytes;
        }
        // The transfer-initiation request (the control-plane round trip)
        // is charged synchronously to the caller.
        self.clock.sleep_ms(self.model.request_latency_ms);

        let tmp = self.staging.join(format!(".{}.tmp", key.key.to_hex()));
        let staged = self.staged_path(&key.key);
        let write = (|| -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(data)?;
            f.sync_data()?;
            fs::rename(&tmp, &staged)
        })();
        if let Err(e) = write {
            let _ = fs::remove_file(&tmp);
            *self.used_bytes.lock() -= key.size_bytes;
            return Err(self.io_err("staging object", e));
        }

        let now = self.clock.now_ns();
        let ticket = {
            let mut st = self.shared.state.lock();
            let admitted = st.scheduler.submit(key.key, key.size_bytes, now);
            let ticket = match admitted {
                Some((start, completion)) => TransferTicket {
                    key: key.key,
                    size_bytes: key.size_bytes,
                    state: TicketState::Active,
                    enqueue_ns: now,
                    start_ns: Some(start),
                    completion_ns: Some(completion),
                    failure: None,
                },
                None => TransferTicket {
                    key: key.key,
                    size_bytes: key.size_bytes,
                    state: TicketState::Queued,
                    enqueue_ns: now,
                    start_ns: None,
                    completion_ns: None,
                    failure: None,
                },
            };
            st.tickets.insert(key.key, ticket.clone());
            self.shared
                .stats
                .set_active_transfers(st.scheduler.active_count() as u64);
            ticket
        };
        self.shared.cv.notify_all();
        self.stats_counters().record_put(key.size_bytes);
        Ok(ticket)
    }

    fn get(&self, key: &ObjectKey) -> Result<Vec<u8>, StoreError> {
        // Local ticket: wait for our own transfer to finish.
        let has_local_ticket = self.shared.state.lock().tickets.contains_key(&key.key);
        if has_local_ticket {
            if self.clock.is_virtual() {
                self.drive_virtual(Some(key.key));
            } else {
                let mut st = self.shared.state.lock();
                loop {
                    match st.tickets.get(&key.key) {
                        Some(t) if t.state == TicketState::Done => break,
                        Some(t) if t.state == TicketState::Failed => {
                            return Err(StoreError::TransferFailed {
                                key: key.key.to_hex(),
                                detail: t.failure.clone().unwrap_or_default(),
                            })
                        }
                        _ => {
                            self.shared.cv.wait_for(&mut st, Duration::from_millis(50));
                        }
                    }
                }
            }
            let ticket = self.shared.state.lock().tickets.get(&key.key).cloned();
            if let Some(t) = ticket {
                if t.state == TicketState::Failed {
                    return Err(StoreError::TransferFailed {
                        key: key.key.to_hex(),
                        detail: t.failure.unwrap_or_default(),
                    });
                }
            }
            let bytes = self.read_done_object(key)?;
            self.stats_counters().record_get(bytes.len() as u64);
            return Ok(bytes);
        }

        // Remote handle: the object was put by another process. The shared
        // directory is the ground truth; wait for the transfer to land.
        let obj = self.object_path(&key.key);
        if !obj.exists() && !self.staged_path(&key.key).exists() {
            return Err(StoreError::NotFound {
                store: self.store_id.0.clone(),
                key: key.key.to_hex(),
            });
        }
        let deadline = crate::clock::monotonic_ns() + REMOTE_GET_TIMEOUT.as_nanos() as u64;
        while !obj.exists() {
            if crate::clock::monotonic_ns() > deadline {
                return Err(StoreError::TransferFailed {
                    key: key.key.to_hex(),
                    detail: "timed out waiting for transfer to land".into(),
                });
            }
            std::thread::sleep(REMOTE_POLL_INTERVAL);
        }
        let bytes = fs::read(&obj).map_err(|e| self.io_err("reading transferred object", e))?;
        self.stats_counters().record_get(bytes.len() as u64);
        Ok(bytes)
    }

    fn exists(&self, key: &ObjectKey) -> Result<bool, StoreError> {
        if self.clock.is_virtual() {
            self.drive_virtual(None);
        }
        Ok(self.object_path(&key.key).exists()
            || self.staged_path(&key.key).exists()
            || self.shared.state.lock().tickets.contains_key(&key.key))
    }

    fn delete(&self, key: &ObjectKey) -> Result<(), StoreError> {
        if let Ok(meta) = fs::metadata(self.object_path(&key.key)) {
            let mut used = self.used_bytes.lock();
            *used = used.saturating_sub(meta.len());
        }
        let _ = fs::remove_file(self.staged_path(&key.key));
        let _ = fs::remove_file(self.objects.join(format!("{}.meta", key.key.to_hex())));
        match fs::remove_file(self.object_path(&key.key)) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(self.io_err("deleting object", e)),
        }
    }

    fn stats(&self) -> StoreStats {
        if self.clock.is_virtual() {
            self.drive_virtual(None);
        }
        self.shared.stats.snapshot()
    }

    fn ticket(&self, key: &ObjectKey) -> Option<TransferTicket> {
        if self.clock.is_virtual() {
            self.drive_virtual(None);
        }
        self.shared.state.lock().tickets.get(&key.key).cloned()
    }

    fn recipe(&self) -> ResolutionRecipe {
        ResolutionRecipe::new(StoreKind::WideArea, &self.store_id).with_param(
            ResolutionRecipe::PARAM_ROOT,
            &self.root.display().to_string(),
        )
    }
}

impl WideAreaStore {
    fn stats_counters(&self) -> &StatCounters {
        &self.shared.stats
    }
}

impl Drop for WideAreaStore {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.shared.cv.notify_all();
        if let Some(h) = self.driver.lock().take() {
            let _ = h.join();
        }
    }
}
