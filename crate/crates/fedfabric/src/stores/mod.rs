//! Object-store backends.
//!
//! Three backends share one [`ObjectStore`] contract: a networked memory KV
//! served over a binary socket protocol, a shared-filesystem store, and a
//! simulated wide-area transfer service. Each is parameterized by a
//! [`NetworkModel`] so a single host reproduces the timing of three sites;
//! only timings differ between backends, never bytes.

mod filesystem;
mod memory_kv;
mod network;
mod wide_area;

pub use filesystem::FilesystemStore;
pub use memory_kv::{MemoryKvClient, MemoryKvServer};
pub use network::{NetworkModel, TicketState, TransferScheduler, TransferTicket};
pub use wide_area::WideAreaStore;

pub use crate::refcore::StoreKind;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::Clock;
use crate::refcore::{ObjectKey, ResolutionRecipe, StoreId};

#[derive(Debug, Clone, Error)]
pub enum StoreError {
    /// The store cannot be reached right now; a retry may succeed.
    #[error("store {store} unavailable: {detail}")]
    Unavailable { store: String, detail: String },
    /// The object does not fit; retrying the same put cannot succeed.
    #[error("object of {size} bytes exceeds remaining capacity of store {store}")]
    CapacityExceeded { store: String, size: u64 },
    #[error("key {key} not found in store {store}")]
    NotFound { store: String, key: String },
    #[error("transfer failed for key {key}: {detail}")]
    TransferFailed { key: String, detail: String },
    #[error("store {store} i/o error: {detail}")]
    Io { store: String, detail: String },
    #[error("store {store} protocol error: {detail}")]
    Protocol { store: String, detail: String },
    #[error("size mismatch for key {key}: declared {declared}, got {actual}")]
    SizeMismatch {
        key: String,
        declared: u64,
        actual: u64,
    },
}

impl StoreError {
    pub fn is_retriable(&self) -> bool {
        matches!(self, StoreError::Unavailable { .. })
    }
}

/// Monotonic operation counters, snapshotted by [`ObjectStore::stats`].
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoreStats {
    pub puts: u64,
    pub gets: u64,
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub active_transfers: u64,
}

/// Shared atomic counters behind [`StoreStats`].
#[derive(Debug, Default)]
pub struct StatCounters {
    puts: AtomicU64,
    gets: AtomicU64,
    bytes_in: AtomicU64,
    bytes_out: AtomicU64,
    active_transfers: AtomicU64,
}

impl StatCounters {
    pub fn record_put(&self, bytes: u64) {
        self.puts.fetch_add(1, Ordering::SeqCst);
        self.bytes_in.fetch_add(bytes, Ordering::SeqCst);
    }

    pub fn record_get(&self, bytes: u64) {
        self.gets.fetch_add(1, Ordering::SeqCst);
        self.bytes_out.fetch_add(bytes, Ordering::SeqCst);
    }

    pub fn set_active_transfers(&self, n: u64) {
        self.active_transfers.store(n, Ordering::SeqCst);
    }

    pub fn snapshot(&self) -> StoreStats {
        StoreStats {
            puts: self.puts.load(Ordering::SeqCst),
            gets: self.gets.load(Ordering::SeqCst),
            bytes_in: self.bytes_in.load(Ordering::SeqCst),
            bytes_out: self.bytes_out.load(Ordering::SeqCst),
            active_transfers: self.active_transfers.load(Ordering::SeqCst),
        }
    }
}

/// The backend contract shared by all three store kinds.
///
/// `put` places bytes durably (or starts a background transfer for
/// wide-area stores) and returns a ticket; `get` blocks until the object's
/// transfer is done and returns the exact bytes.
pub trait ObjectStore: Send + Sync {
    fn store_id(&self) -> &StoreId;
    fn kind(&self) -> StoreKind;

    fn put(&self, key: &ObjectKey, data: &[u8]) -> Result<TransferTicket, StoreError>;
    fn get(&self, key: &ObjectKey) -> Result<Vec<u8>, StoreError>;
    fn exists(&self, key: &ObjectKey) -> Result<bool, StoreError>;
    fn delete(&self, key: &ObjectKey) -> Result<(), StoreError>;

    /// Counter snapshot. For the memory KV this is served by the store
    /// server and therefore global; filesystem and wide-area handles count
    /// locally per process.
    fn stats(&self) -> StoreStats;

    /// Snapshot of the ticket for a key this handle has put, if any.
    fn ticket(&self, key: &ObjectKey) -> Option<TransferTicket>;

    /// Recipe embedded into references so any configured site can resolve.
    fn recipe(&self) -> ResolutionRecipe;
}

/// Kind-specific store parameters, as written in the run config.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StoreConfig {
    pub id: String,
    pub kind: StoreKind,
    /// Listen/connect address (memory-kv only).
    #[serde(default)]
    pub address: Option<String>,
    /// Root directory (filesystem and wide-area).
    #[serde(default)]
    pub root: Option<String>,
    #[serde(default = "StoreConfig::default_capacity")]
    pub capacity_bytes: u64,
    #[serde(default)]
    pub network: NetworkModel,
}

impl StoreConfig {
    fn default_capacity() -> u64 {
        8 << 30
    }

    pub fn store_id(&self) -> StoreId {
        StoreId(self.id.clone())
    }

    /// Rebuild a connectable config from a reference recipe. The network
    /// model is not carried by recipes; the resolving site's latency model
    /// comes from its own binding when one exists, or defaults here.
    pub fn from_recipe(recipe: &ResolutionRecipe) -> Option<StoreConfig> {
        let id = recipe.store_id();
        if id.0.is_empty() {
            return None;
        }
        Some(StoreConfig {
            id: id.0,
            kind: recipe.store_kind,
            address: recipe
                .param(ResolutionRecipe::PARAM_ADDRESS)
                .map(str::to_owned),
            root: recipe.param(ResolutionRecipe::PARAM_ROOT).map(str::to_owned),
            capacity_bytes: Self::default_capacity(),
            network: NetworkModel::default(),
        })
    }
}

/// Open a client handle for a store config.
///
/// For `memory-kv` this connects to the store server; for `filesystem` and
/// `wide-area` it opens the rooted directories directly.
pub fn open_store(cfg: &StoreConfig, clock: Clock) -> Result<Arc<dyn ObjectStore>, StoreError> {
    match cfg.kind {
        StoreKind::MemoryKv => {
            let addr = cfg.address.clone().ok_or_else(|| StoreError::Protocol {
                store: cfg.id.clone(),
                detail: "memory-kv store config requires an address".into(),
            })?;
            Ok(Arc::new(MemoryKvClient::new(cfg.store_id(), addr)))
        }
        StoreKind::Filesystem => {
            let root = cfg.root.clone().ok_or_else(|| StoreError::Protocol {
                store: cfg.id.clone(),
                detail: "filesystem store config requires a root".into(),
            })?;
            Ok(Arc::new(FilesystemStore::open(
                cfg.store_id(),
                root.into(),
                cfg.network.clone(),
                cfg.capacity_bytes,
                clock,
            )?))
        }
        StoreKind::WideArea => {
            let root = cfg.root.clone().ok_or_else(|| StoreError::Protocol {
                store: cfg.id.clone(),
                detail: "wide-area store config requires a root".into(),
            })?;
            Ok(Arc::new(WideAreaStore::open(
                cfg.store_id(),
                root.into(),
                cfg.network.clone(),
                cfg.capacity_bytes,
                clock,
            )?))
        }
    }
}
