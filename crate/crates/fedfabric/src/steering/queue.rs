//! Score-ordered candidate queue with atomic reprioritization.

use std::collections::HashMap;
use std::hash::Hash;

use parking_lot::Mutex;

struct Inner<T> {
    /// Sorted descending by score, ties broken by ascending id.
    entries: Vec<(T, f64)>,
    generation: u64,
}

/// Candidates ordered by score. `pop` takes the current head;
/// `reprioritize` swaps in a new order atomically with respect to pops, so
/// concurrent pops see either the old or the new order and every candidate
/// is popped exactly once.
pub struct PrioritizedTaskQueue<T> {
    inner: Mutex<Inner<T>>,
}

impl<T: Ord + Hash + Clone> Default for PrioritizedTaskQueue<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Ord + Hash + Clone> PrioritizedTaskQueue<T> {
    pub fn new() -> Self {
        PrioritizedTaskQueue {
            inner: Mutex::new(Inner {
                entries: Vec::new(),
                generation: 0,
            }),
        }
    }

    fn sort(entries: &mut [(T, f64)]) {
        entries.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    }

    pub fn push(&self, id: T, score: f64) {
        let mut inner = self.inner.lock();
        inner.entries.push((id, score));
        Self::sort(&mut inner.entries);
    }

    pub fn extend<I: IntoIterator<Item = (T, f64)>>(&self, items: I) {
        let mut inner = self.inner.lock();
        inner.entries.extend(items);
        Self::sort(&mut inner.entries);
    }

    /// Highest-score head, or None when empty.
    pub fn pop(&self) -> Option<T> {
        let mut inner = self.inner.lock();
        if inner.entries.is_empty() {
            return None;
        }
        Some(inner.entries.remove(0).0)
    }

    pub fn len(&self) -> usize {
        self.inner.lock().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn generation(&self) -> u64 {
        self.inner.lock().generation
    }

    /// Reorder by the given scores (candidates missing from the map keep
    /// their old score) and bump the generation. Runs atomically under the
    /// queue lock: no candidate is lost or duplicated across the swap.
    pub fn reprioritize(&self, scores: &HashMap<T, f64>) -> u64 {
        let mut inner = self.inner.lock();
        for (id, score) in inner.entries.iter_mut() {
            if let Some(new) = scores.get(id) {
                *score = *new;
            }
        }
        Self::sort(&mut inner.entries);
        inner.generation += 1;
        inner.generation
    }

    pub fn snapshot(&self) -> Vec<(T, f64)> {
        self.inner.lock().entries.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;
    use std::sync::Arc;

    #[test]
    fn pops_in_score_order() {
        let q = PrioritizedTaskQueue::new();
        q.extend([("a", 1.0), ("b", 3.0), ("c", 2.0)]);
        assert_eq!(q.pop(), Some("b"));
        assert_eq!(q.pop(), Some("c"));
        assert_eq!(q.pop(), Some("a"));
        assert_eq!(q.pop(), None);
    }

    #[test]
    fn ties_break_by_ascending_id() {
        let q = PrioritizedTaskQueue::new();
        q.extend([(3u64, 1.0), (1u64, 1.0), (2u64, 1.0)]);
        assert_eq!(q.pop(), Some(1));
        assert_eq!(q.pop(), Some(2));
        assert_eq!(q.pop(), Some(3));
    }

    #[test]
    fn reprioritize_reorders_and_bumps_generation() {
        let q = PrioritizedTaskQueue::new();
        q.extend([("a", 1.0), ("b", 3.0), ("c", 2.0)]);
        let scores = HashMap::from([("a", 9.0), ("c", 5.0)]);
        assert_eq!(q.reprioritize(&scores), 1);
        assert_eq!(q.pop(), Some("a"));
        assert_eq!(q.pop(), Some("c"));
        assert_eq!(q.pop(), Some("b")); // kept old score 3.0
    }

    #[test]
    fn empty_score_map_keeps_order_but_increments_generation() {
        let q = PrioritizedTaskQueue::new();
        q.extend([("a", 1.0), ("b", 3.0)]);
        let g0 = q.generation();
        q.reprioritize(&HashMap::new());
        assert_eq!(q.generation(), g0 + 1);
        assert_eq!(q.pop(), Some("b"));
        assert_eq!(q.pop(), Some("a"));
    }

    #[test]
    fn concurrent_pop_and_reprioritize_conserves_candidates() {
        // Linearizability stress: many interleavings of pop vs
        // reprioritize; every candidate must be popped exactly once.
        let trials = 10_000;
        let n = 12u64;
        for trial in 0..trials {
            let q = Arc::new(PrioritizedTaskQueue::new());
            q.extend((0..n).map(|i| (i, i as f64)));
            let poppers: Vec<_> = (0..1)
                .map(|_| {
                    let q = Arc::clone(&q);
                    std::thread::spawn(move || {
                        let mut got = Vec::new();
                        while let Some(id) = q.pop() {
                            got.push(id);
                        }
                        got
                    })
                })
                .collect();
            let swapper = {
                let q = Arc::clone(&q);
                std::thread::spawn(move || {
                    for round in 0..2 {
                        let scores: HashMap<u64, f64> =
                            (0..n).map(|i| (i, ((i + round + trial) % n) as f64)).collect();
                        q.reprioritize(&scores);
                    }
                })
            };
            let mut all: Vec<u64> = Vec::new();
            for p in poppers {
                all.extend(p.join().unwrap());
            }
            swapper.join().unwrap();
            let unique: HashSet<u64> = all.iter().copied().collect();
            assert_eq!(all.len(), n as usize, "trial {trial}: popped {}", all.len());
            assert_eq!(unique.len(), n as usize, "trial {trial}: duplicates");
        }
    }
}
