//! Shared-filesystem store.
//!
//! Layout: `<root>/<store_id>/<key-hex>` with a `<key-hex>.meta` sidecar of
//! UTF-8 `key=value` lines (size, digest, ticket timestamps). Objects are
//! written to a temp file and atomically renamed, so concurrent readers
//! never observe partial objects. Any process rooted at the same directory
//! shares the store.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use parking_lot::Mutex;

use crate::clock::Clock;
use crate::refcore::{content_digest, Key128, ObjectKey, ResolutionRecipe, StoreId, StoreKind};
use crate::stores::{
    NetworkModel, ObjectStore, StatCounters, StoreError, StoreStats, TicketState, TransferTicket,
};

pub struct FilesystemStore {
    store_id: StoreId,
    root: PathBuf,
    dir: PathBuf,
    model: NetworkModel,
    capacity_bytes: u64,
    clock: Clock,
    stats: StatCounters,
    used_bytes: Mutex<u64>,
    tickets: Mutex<HashMap<Key128, TransferTicket>>,
}

impl FilesystemStore {
    pub fn open(
        store_id: StoreId,
        root: PathBuf,
        model: NetworkModel,
        capacity_bytes: u64,
        clock: Clock,
    ) -> Result<Self, StoreError> {
        let dir = root.join(&store_id.0);
        fs::create_dir_all(&dir).map_err(|e| StoreError::Io {
            store: store_id.0.clone(),
            detail: format!("creating {}: {e}", dir.display()),
        })?;
        Ok(Self {
            store_id,
            root,
            dir,
            model,
            capacity_bytes,
            clock,
            stats: StatCounters::default(),
            used_bytes: Mutex::new(0),
            tickets: Mutex::new(HashMap::new()),
        })
    }

    fn object_path(&self, key: &Key128) -> PathBuf {
        self.dir.join(key.to_hex())
    }

    fn meta_path(&self, key: &Key128) -> PathBuf {
        self.dir.join(format!("{}.meta", key.to_hex()))
    }

    fn io_err(&self, what: &str, e: std::io::Error) -> StoreError {
        StoreError::Io {
            store: self.store_id.0.clone(),
            detail: format!("{what}: {e}"),
        }
    }
}

impl ObjectStore for FilesystemStore {
    fn store_id(&self) -> &StoreId {
        &self.store_id
    }

    fn kind(&self) -> StoreKind {
        StoreKind::Filesystem
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
        let enqueue = self.clock.now_ns();
        self.clock
            .sleep_ms(self.model.op_latency_ns(key.size_bytes) as f64 / 1e6);

        let tmp = self.dir.join(format!(".{}.tmp", key.key.to_hex()));
        let write = (|| -> std::io::Result<()> {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(data)?;
            f.sync_data()?;
            fs::rename(&tmp, self.object_path(&key.key))
        })();
        if let Err(e) = write {
            let _ = fs::remove_file(&tmp);
            *self.used_bytes.lock() -= key.size_bytes;
            return Err(self.io_err("writing object", e));
        }

        let done = self.clock.now_ns();
        let ticket = TransferTicket {
            key: key.key,
            size_bytes: key.size_bytes,
            state: TicketState::Done,
            enqueue_ns: enqueue,
            start_ns: Some(enqueue),
            completion_ns: Some(done),
            failure: None,
        };
        let meta = format!(
            "size={}\ndigest={}\nenqueue_ns={}\nstart_ns={}\ncompletion_ns={}\nstate=done\n",
            key.size_bytes,
            hex::encode(content_digest(data)),
            enqueue,
            enqueue,
            done,
        );
        fs::write(self.meta_path(&key.key), meta)
            .map_err(|e| self.io_err("writing meta sidecar", e))?;

        self.stats.record_put(key.size_bytes);
        self.tickets.lock().insert(key.key, ticket.clone());
        Ok(ticket)
    }

    fn get(&self, key: &ObjectKey) -> Result<Vec<u8>, StoreError> {
        let path = self.object_path(&key.key);
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                return Err(StoreError::NotFound {
                    store: self.store_id.0.clone(),
                    key: key.key.to_hex(),
                })
            }
            Err(e) => return Err(self.io_err("reading object", e)),
        };
        self.clock
            .sleep_ms(self.model.op_latency_ns(bytes.len() as u64) as f64 / 1e6);
        self.stats.record_get(bytes.len() as u64);
        Ok(bytes)
    }

    fn exists(&self, key: &ObjectKey) -> Result<bool, StoreError> {
        self.clock.sleep_ms(self.model.request_latency_ms);
        Ok(self.object_path(&key.key).exists())
    }

    fn delete(&self, key: &ObjectKey) -> Result<(), StoreError> {
        self.clock.sleep_ms(self.model.request_latency_ms);
        let path = self.object_path(&key.key);
        if let Ok(meta) = fs::metadata(&path) {
            let mut used = self.used_bytes.lock();
            *used = used.saturating_sub(meta.len());
        }
        let _ = fs::remove_file(self.meta_path(&key.key));
        match fs::remove_file(&path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(self.io_err("deleting object", e)),
        }
    }

    fn stats(&self) -> StoreStats {
        self.stats.snapshot()
    }

    fn ticket(&self, key: &ObjectKey) -> Option<TransferTicket> {
        self.tickets.lock().get(&key.key).cloned()
    }

    fn recipe(&self) -> ResolutionRecipe {
        ResolutionRecipe::new(StoreKind::Filesystem, &self.store_id).with_param(
            ResolutionRecipe::PARAM_ROOT,
            &self.root.display().to_string(),
        )
    }
}
