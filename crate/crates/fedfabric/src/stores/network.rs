//! Latency/bandwidth/concurrency model and the FIFO transfer scheduler.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::refcore::Key128;

/// Parametrized network behavior of one store.
///
/// `request_latency_ms` is charged per control-plane operation,
/// `startup_latency_ms` once per transfer, and payload time is
/// `size / bandwidth_bytes_per_s`. Jitter multiplies each injected delay by
/// `1 + jitter_fraction * u` with `u` uniform in `[0, 1)`, so jitter never
/// shortens a delay and zero jitter with a fixed seed is fully
/// deterministic.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NetworkModel {
    #[serde(default)]
    pub request_latency_ms: f64,
    #[serde(default)]
    pub startup_latency_ms: f64,
    #[serde(default = "NetworkModel::default_bandwidth")]
    pub bandwidth_bytes_per_s: f64,
    #[serde(default = "NetworkModel::default_max_concurrent")]
    pub max_concurrent_transfers: usize,
    #[serde(default)]
    pub jitter_fraction: f64,
    #[serde(default)]
    pub rng_seed: u64,
}

impl Default for NetworkModel {
    fn default() -> Self {
        NetworkModel {
            request_latency_ms: 0.0,
            startup_latency_ms: 0.0,
            bandwidth_bytes_per_s: Self::default_bandwidth(),
            max_concurrent_transfers: Self::default_max_concurrent(),
            jitter_fraction: 0.0,
            rng_seed: 0,
        }
    }
}

impl NetworkModel {
    fn default_bandwidth() -> f64 {
        1e9
    }

    fn default_max_concurrent() -> usize {
        4
    }

    /// Instantaneous model: 1 ms requests, 1 GB/s, no fixed transfer cost.
    pub fn fast_local() -> Self {
        NetworkModel {
            request_latency_ms: 1.0,
            ..Default::default()
        }
    }

    /// Defaults matching an HTTPS-fronted wide-area transfer service:
    /// 500 ms per request, 1 s per-transfer startup, 50 MB/s, 4 concurrent.
    pub fn wide_area_default() -> Self {
        NetworkModel {
            request_latency_ms: 500.0,
            startup_latency_ms: 1_000.0,
            bandwidth_bytes_per_s: 50e6,
            max_concurrent_transfers: 4,
            jitter_fraction: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.request_latency_ms < 0.0 || self.startup_latency_ms < 0.0 {
            return Err("latencies must be >= 0".into());
        }
        if !(self.bandwidth_bytes_per_s > 0.0) {
            return Err("bandwidth must be > 0".into());
        }
        if self.max_concurrent_transfers < 1 {
            return Err("max_concurrent_transfers must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.jitter_fraction) {
            return Err("jitter_fraction must be in [0, 1)".into());
        }
        Ok(())
    }

    pub fn request_latency_ns(&self) -> u64 {
        (self.request_latency_ms * 1e6) as u64
    }

    /// Pre-jitter transfer duration: startup plus payload time.
    pub fn base_transfer_ns(&self, size_bytes: u64) -> u64 {
        let payload_s = size_bytes as f64 / self.bandwidth_bytes_per_s;
        (self.startup_latency_ms * 1e6 + payload_s * 1e9) as u64
    }

    /// Per-operation payload time alone (no startup), used by the KV and
    /// filesystem backends that have no background transfers.
    pub fn op_latency_ns(&self, size_bytes: u64) -> u64 {
        let payload_s = size_bytes as f64 / self.bandwidth_bytes_per_s;
        (self.request_latency_ms * 1e6 + payload_s * 1e9) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TicketState {
    Queued,
    Active,
    Done,
    Failed,
}

/// Lifecycle of one transfer into a store.
///
/// States only move `queued -> active -> {done, failed}`; for done tickets
/// `completion_ns >= start_ns + startup + size/bandwidth` holds by
/// construction (jitter only lengthens transfers).
#[derive(Debug, Clone, PartialEq)]
pub struct TransferTicket {
    pub key: Key128,
    pub size_bytes: u64,
    pub state: TicketState,
    pub enqueue_ns: u64,
    pub start_ns: Option<u64>,
    pub completion_ns: Option<u64>,
    pub failure: Option<String>,
}

impl TransferTicket {
    pub fn is_done(&self) -> bool {
        self.state == TicketState::Done
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self.state, TicketState::Done | TicketState::Failed)
    }
}

struct Waiting {
    key: Key128,
    size_bytes: u64,
    jitter_draw: f64,
}

struct Active {
    key: Key128,
    completion_ns: u64,
}

/// FIFO admission with at most `max_concurrent_transfers` active at once.
///
/// The scheduler is a time-stepped state machine: callers submit transfers
/// at a timestamp and then drive it with `advance_to`. The wall-clock store
/// drives it from a background thread at real instants; the virtual-clock
/// store drives it by jumping to the next completion. Same machine, two
/// drivers.
pub struct TransferScheduler {
    model: NetworkModel,
    rng: ChaCha8Rng,
    waiting: VecDeque<Waiting>,
    active: Vec<Active>,
    peak_active: usize,
}

impl TransferScheduler {
    pub fn new(model: NetworkModel) -> Self {
        let rng = ChaCha8Rng::seed_from_u64(model.rng_seed);
        Self {
            model,
            rng,
            waiting: VecDeque::new(),
            active: Vec::new(),
            peak_active: 0,
        }
    }

    pub fn model(&self) -> &NetworkModel {
        &self.model
    }

    fn jittered_duration_ns(&self, size_bytes: u64, draw: f64) -> u64 {
        let base = self.model.base_transfer_ns(size_bytes) as f64;
        (base * (1.0 + self.model.jitter_fraction * draw)) as u64
    }

    /// Submit a transfer at time `now_ns`. Returns `(start, completion)` if
    /// it was admitted immediately, or `None` when queued behind the
    /// concurrency cap. The jitter draw happens here, in submission order,
    /// so timelines are reproducible for a fixed seed.
    pub fn submit(&mut self, key: Key128, size_bytes: u64, now_ns: u64) -> Option<(u64, u64)> {
        let jitter_draw: f64 = self.rng.gen_range(0.0..1.0);
        if self.active.len() < self.model.max_concurrent_transfers {
            let completion = now_ns + self.jittered_duration_ns(size_bytes, jitter_draw);
            self.active.push(Active {
                key,
                completion_ns: completion,
            });
            self.peak_active = self.peak_active.max(self.active.len());
            Some((now_ns, completion))
        } else {
            self.waiting.push_back(Waiting {
                key,
                size_bytes,
                jitter_draw,
            });
            None
        }
    }

    /// Earliest pending completion, if any transfer is active.
    pub fn next_completion_ns(&self) -> Option<u64> {
        self.active.iter().map(|a| a.completion_ns).min()
    }

    pub fn active_count(&self) -> usize {
        self.active.len()
    }

    pub fn queued_count(&self) -> usize {
        self.waiting.len()
    }

    /// Highest number of simultaneously active transfers ever observed.
    pub fn peak_active(&self) -> usize {
        self.peak_active
    }

    /// Process every completion with `completion <= now_ns`, admitting
    /// queued transfers at the instant a slot frees. Each completion is
    /// reported through `on_done(key, start_of_next, completion)`; admitted
    /// successors are reported through `on_start(key, start, completion)`.
    pub fn advance_to<FDone, FStart>(
        &mut self,
        now_ns: u64,
        mut on_done: FDone,
        mut on_start: FStart,
    ) where
        FDone: FnMut(Key128, u64),
        FStart: FnMut(Key128, u64, u64),
    {
        loop {
            let Some(min_idx) = self
                .active
                .iter()
                .enumerate()
                .min_by_key(|(_, a)| a.completion_ns)
                .map(|(i, _)| i)
            else {
                return;
            };
            if self.active[min_idx].completion_ns > now_ns {
                return;
            }
            let done = self.active.swap_remove(min_idx);
            on_done(done.key, done.completion_ns);
            // The freed slot admits the next queued transfer at exactly the
            // completion instant.
            if let Some(w) = self.waiting.pop_front() {
                let start = done.completion_ns;
                let completion = start + self.jittered_duration_ns(w.size_bytes, w.jitter_draw);
                on_start(w.key, start, completion);
                self.active.push(Active {
                    key: w.key,
                    completion_ns: completion,
                });
                self.peak_active = self.peak_active.max(self.active.len());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn key(b: u8) -> Key128 {
        Key128([b; 16])
    }

    fn model(k: usize) -> NetworkModel {
        NetworkModel {
            request_latency_ms: 0.0,
            startup_latency_ms: 100.0,
            bandwidth_bytes_per_s: 1e6, // 1 MB/s: 1 ms per kB
            max_concurrent_transfers: k,
            jitter_fraction: 0.0,
            rng_seed: 7,
        }
    }

    #[test]
    fn immediate_admission_below_cap() {
        let mut s = TransferScheduler::new(model(2));
        let (start, done) = s.submit(key(1), 1_000_000, 0).unwrap();
        assert_eq!(start, 0);
        assert_eq!(done, 1_100_000_000); // 100 ms startup + 1 s payload
    }

    #[test]
    fn fifo_admission_respects_cap() {
        let mut s = TransferScheduler::new(model(2));
        s.submit(key(1), 1_000_000, 0).unwrap();
        s.submit(key(2), 2_000_000, 0).unwrap();
        assert!(s.submit(key(3), 500_000, 0).is_none());
        assert!(s.submit(key(4), 500_000, 0).is_none());
        assert_eq!(s.active_count(), 2);
        assert_eq!(s.queued_count(), 2);

        let mut started = Vec::new();
        let mut finished = Vec::new();
        s.advance_to(
            u64::MAX,
            |k, at| finished.push((k, at)),
            |k, at, until| started.push((k, at, until)),
        );
        // key1 completes at 1.1 s, key3 starts exactly then
        assert_eq!(finished[0].0, key(1));
        assert_eq!(started[0].0, key(3));
        assert_eq!(started[0].1, 1_100_000_000);
        // key3 completes at 1.7 s, freeing a slot for key4
        assert_eq!(started[1].0, key(4));
        assert_eq!(started[1].1, 1_700_000_000);
        assert_eq!(finished.len(), 4);
        assert!(s.peak_active() <= 2);
    }

    #[test]
    fn deterministic_for_fixed_seed_with_jitter() {
        let mut m = model(1);
        m.jitter_fraction = 0.5;
        let run = |m: &NetworkModel| {
            let mut s = TransferScheduler::new(m.clone());
            let mut times = vec![s.submit(key(1), 10_000, 0).unwrap()];
            s.submit(key(2), 10_000, 0);
            s.advance_to(u64::MAX, |_, _| {}, |_, at, until| times.push((at, until)));
            times
        };
        assert_eq!(run(&m), run(&m));
    }

    #[test]
    fn jitter_never_shortens() {
        let mut m = model(1);
        m.jitter_fraction = 0.9;
        let mut s = TransferScheduler::new(m.clone());
        let (start, done) = s.submit(key(1), 123_456, 5_000).unwrap();
        assert!(done - start >= m.base_transfer_ns(123_456));
    }
}
