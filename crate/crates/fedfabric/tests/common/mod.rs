//! Shared helpers for integration tests.
#![allow(dead_code)]

use std::sync::{Mutex, MutexGuard, OnceLock};

/// Multi-process scenario runs contend for the whole machine; tests that
/// spawn a fabric take this lock so they execute one at a time even when
/// the harness runs tests in parallel.
pub fn fabric_lock() -> MutexGuard<'static, ()> {
    static LOCK: OnceLock<Mutex<()>> = OnceLock::new();
    match LOCK.get_or_init(|| Mutex::new(())).lock() {
        Ok(g) => g,
        Err(poisoned) => poisoned.into_inner(),
    }
}

/// The independent timing oracle for transfer schedules: a single-threaded
/// K-slot replay. Given per-transfer (enqueue time, duration), returns each
/// transfer's (start, completion) under FIFO admission with `slots`
/// concurrent transfers. Deliberately written apart from the production
/// scheduler: a plain slot-array simulation, no event queue.
pub fn fifo_slots_oracle(transfers: &[(u64, u64)], slots: usize) -> Vec<(u64, u64)> {
    let mut slot_free: Vec<u64> = vec![0; slots.max(1)];
    let mut out = Vec::with_capacity(transfers.len());
    for (enqueue, duration) in transfers {
        // earliest-free slot takes the next FIFO transfer
        let (idx, free_at) = slot_free
            .iter()
            .copied()
            .enumerate()
            .min_by_key(|(_, t)| *t)
            .unwrap();
        let start = free_at.max(*enqueue);
        let completion = start + duration;
        slot_free[idx] = completion;
        out.push((start, completion));
    }
    out
}
