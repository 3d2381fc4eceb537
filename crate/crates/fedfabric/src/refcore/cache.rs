//! Per-site resolve cache: LRU by bytes with per-key fetch coalescing, so
//! concurrent first resolves of one key perform exactly one store fetch.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::{Condvar, Mutex};

use super::{Key128, ProxyError, StoreId};

pub const DEFAULT_CACHE_CAPACITY: u64 = 1 << 30;

type CacheKey = (StoreId, Key128);

struct Entry {
    bytes: Arc<Vec<u8>>,
    last_used: u64,
}

struct Inner {
    entries: HashMap<CacheKey, Entry>,
    used_bytes: u64,
    capacity_bytes: u64,
    tick: u64,
    hits: u64,
    misses: u64,
    evictions: u64,
    fetches: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub evictions: u64,
    /// Store fetches actually performed (<= misses under coalescing).
    pub fetches: u64,
    pub used_bytes: u64,
}

struct Flight {
    state: Mutex<Option<Result<Arc<Vec<u8>>, ProxyError>>>,
    cv: Condvar,
}

impl Flight {
    fn new() -> Arc<Self> {
        Arc::new(Flight {
            state: Mutex::new(None),
            cv: Condvar::new(),
        })
    }

    fn complete(&self, result: Result<Arc<Vec<u8>>, ProxyError>) {
        *self.state.lock() = Some(result);
        self.cv.notify_all();
    }

    fn wait(&self) -> Result<Arc<Vec<u8>>, ProxyError> {
        let mut guard = self.state.lock();
        while guard.is_none() {
            self.cv.wait(&mut guard);
        }
        guard.as_ref().unwrap().clone()
    }
}

/// In-memory LRU over resolved objects, keyed by (store id, object key).
pub struct ResolveCache {
    inner: Mutex<Inner>,
    flights: Mutex<HashMap<CacheKey, Arc<Flight>>>,
}

impl Default for ResolveCache {
    fn default() -> Self {
        Self::new(DEFAULT_CACHE_CAPACITY)
    }
}

impl ResolveCache {
    pub fn new(capacity_bytes: u64) -> Self {
        Self {
            inner: Mutex::new(Inner {
                entries: HashMap::new(),
                used_bytes: 0,
                capacity_bytes,
                tick: 0,
                hits: 0,
                misses: 0,
                evictions: 0,
                fetches: 0,
            }),
            flights: Mutex::new(HashMap::new()),
        }
    }

    pub fn stats(&self) -> CacheStats {
        let inner = self.inner.lock();
        CacheStats {
            hits: inner.hits,
            misses: inner.misses,
            evictions: inner.evictions,
            fetches: inner.fetches,
            used_bytes: inner.used_bytes,
        }
    }

    pub fn lookup(&self, store_id: &StoreId, key: &Key128) -> Option<Arc<Vec<u8>>> {
        let mut inner = self.inner.lock();
        inner.tick += 1;
        let tick = inner.tick;
        match inner.entries.get_mut(&(store_id.clone(), *key)) {
            Some(e) => {
                e.last_used = tick;
                let out = Arc::clone(&e.bytes);
                inner.hits += 1;
                Some(out)
            }
            None => {
                inner.misses += 1;
                None
            }
        }
    }

    fn insert(&self, cache_key: CacheKey, bytes: Arc<Vec<u8>>) {
        let mut inner = self.inner.lock();
        let len = bytes.len() as u64;
        if len > inner.capacity_bytes {
            return; // larger than the whole cache: serve uncached
        }
        // Evict least-recently-used entries until the new object fits.
        while inner.used_bytes + len > inner.capacity_bytes {
            let Some(victim) = inner
                .entries
                .iter()
                .min_by_key(|(_, e)| e.last_used)
                .map(|(k, _)| k.clone())
            else {
                break;
            };
            if let Some(e) = inner.entries.remove(&victim) {
                inner.used_bytes -= e.bytes.len() as u64;
                inner.evictions += 1;
            }
        }
        inner.tick += 1;
        let tick = inner.tick;
        if let Some(old) = inner.entries.insert(
            cache_key,
            Entry {
                bytes,
                last_used: tick,
            },
        ) {
            inner.used_bytes -= old.bytes.len() as u64;
        }
        inner.used_bytes += len;
    }

    /// Cached bytes for `key`, fetching once via `fetch` on a miss.
    ///
    /// Concurrent callers for the same key block on the in-flight fetch and
    /// share its outcome (success or error) instead of issuing their own.
    pub fn get_or_fetch<F>(
        &self,
        store_id: &StoreId,
        key: &Key128,
        fetch: F,
    ) -> Result<Arc<Vec<u8>>, ProxyError>
    where
        F: FnOnce() -> Result<Arc<Vec<u8>>, ProxyError>,
    {
        if let Some(bytes) = self.lookup(store_id, key) {
            return Ok(bytes);
        }
        let cache_key = (store_id.clone(), *key);
        let (flight, leader) = {
            let mut flights = self.flights.lock();
            match flights.get(&cache_key) {
                Some(existing) => (Arc::clone(existing), false),
                None => {
                    let f = Flight::new();
                    flights.insert(cache_key.clone(), Arc::clone(&f));
                    (f, true)
                }
            }
        };
        if !leader {
            return flight.wait();
        }
        self.inner.lock().fetches += 1;
        let result = fetch();
        if let Ok(bytes) = &result {
            self.insert(cache_key.clone(), Arc::clone(bytes));
        }
        flight.complete(result.clone());
        self.flights.lock().remove(&cache_key);
        result
    }

    pub fn invalidate(&self, store_id: &StoreId, key: &Key128) {
        let mut inner = self.inner.lock();
        if let Some(e) = inner.entries.remove(&(store_id.clone(), *key)) {
            inner.used_bytes -= e.bytes.len() as u64;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn sid() -> StoreId {
        "s".into()
    }

    fn k(b: u8) -> Key128 {
        Key128([b; 16])
    }

    #[test]
    fn fetches_once_then_hits() {
        let cache = ResolveCache::new(1 << 20);
        let calls = AtomicUsize::new(0);
        for _ in 0..3 {
            let got = cache
                .get_or_fetch(&sid(), &k(1), || {
                    calls.fetch_add(1, Ordering::SeqCst);
                    Ok(Arc::new(vec![7u8; 10]))
                })
                .unwrap();
            assert_eq!(got.len(), 10);
        }
        assert_eq!(calls.load(Ordering::SeqCst), 1);
        assert_eq!(cache.stats().fetches, 1);
        assert_eq!(cache.stats().hits, 2);
    }

    #[test]
    fn lru_eviction_by_bytes() {
        let cache = ResolveCache::new(25);
        cache
            .get_or_fetch(&sid(), &k(1), || Ok(Arc::new(vec![0u8; 10])))
            .unwrap();
        cache
            .get_or_fetch(&sid(), &k(2), || Ok(Arc::new(vec![0u8; 10])))
            .unwrap();
        // touch k1 so k2 is the LRU victim
        assert!(cache.lookup(&sid(), &k(1)).is_some());
        cache
            .get_or_fetch(&sid(), &k(3), || Ok(Arc::new(vec![0u8; 10])))
            .unwrap();
        assert!(cache.lookup(&sid(), &k(1)).is_some());
        assert!(cache.lookup(&sid(), &k(2)).is_none());
        assert_eq!(cache.stats().evictions, 1);
    }

    #[test]
    fn oversized_objects_bypass_cache() {
        let cache = ResolveCache::new(8);
        cache
            .get_or_fetch(&sid(), &k(1), || Ok(Arc::new(vec![0u8; 100])))
            .unwrap();
        assert!(cache.lookup(&sid(), &k(1)).is_none());
    }

    #[test]
    fn concurrent_first_resolves_share_one_fetch() {
        use std::sync::Barrier;
        let cache = Arc::new(ResolveCache::new(1 << 20));
        let calls = Arc::new(AtomicUsize::new(0));
        let barrier = Arc::new(Barrier::new(8));
        let mut handles = Vec::new();
        for _ in 0..8 {
            let cache = Arc::clone(&cache);
            let calls = Arc::clone(&calls);
            let barrier = Arc::clone(&barrier);
            handles.push(std::thread::spawn(move || {
                barrier.wait();
                cache
                    .get_or_fetch(&sid(), &k(9), || {
                        calls.fetch_add(1, Ordering::SeqCst);
                        std::thread::sleep(std::time::Duration::from_millis(50));
                        Ok(Arc::new(vec![1u8; 4]))
                    })
                    .unwrap()
            }));
        }
        for h in handles {
            assert_eq!(*h.join().unwrap(), vec![1u8; 4]);
        }
        assert_eq!(calls.load(Ordering::SeqCst), 1, "exactly one store fetch");
    }
}
