//! Time sources: the system-wide monotonic clock plus an optional virtual
//! clock used for deterministic single-process tests.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

/// Nanoseconds from `CLOCK_MONOTONIC`.
///
/// On Linux this clock is shared by every process on the host, so raw
/// timestamps from different processes are comparable before any offset
/// correction is applied.
#[cfg(target_os = "linux")]
pub fn monotonic_ns() -> u64 {
    let mut ts = libc::timespec {
        tv_sec: 0,
        tv_nsec: 0,
    };
    // SAFETY: ts is a valid out-pointer; CLOCK_MONOTONIC is always supported.
    unsafe {
        libc::clock_gettime(libc::CLOCK_MONOTONIC, &mut ts);
    }
    ts.tv_sec as u64 * 1_000_000_000 + ts.tv_nsec as u64
}

#[cfg(not(target_os = "linux"))]
pub fn monotonic_ns() -> u64 {
    use std::time::{SystemTime, UNIX_EPOCH};
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .unwrap_or_default()
        .as_nanos() as u64
}

/// A monotonically advancing simulated clock.
///
/// `advance_to` only ever moves forward. Intended for single-process
/// discrete-event tests; concurrent use is safe but the discrete-event
/// drivers in this crate step it from one thread.
#[derive(Debug, Default)]
pub struct VirtualClock {
    now_ns: AtomicU64,
}

impl VirtualClock {
    pub fn new(start_ns: u64) -> Self {
        Self {
            now_ns: AtomicU64::new(start_ns),
        }
    }

    pub fn now_ns(&self) -> u64 {
        self.now_ns.load(Ordering::SeqCst)
    }

    pub fn advance_to(&self, t_ns: u64) {
        self.now_ns.fetch_max(t_ns, Ordering::SeqCst);
    }

    pub fn advance_by(&self, d_ns: u64) {
        self.now_ns.fetch_add(d_ns, Ordering::SeqCst);
    }
}

/// Either the wall clock (real sleeps) or a shared [`VirtualClock`].
#[derive(Clone, Default)]
pub enum Clock {
    #[default]
    Wall,
    Virtual(Arc<VirtualClock>),
}

impl Clock {
    pub fn new_virtual() -> Self {
        Clock::Virtual(Arc::new(VirtualClock::new(0)))
    }

    pub fn is_virtual(&self) -> bool {
        matches!(self, Clock::Virtual(_))
    }

    pub fn now_ns(&self) -> u64 {
        match self {
            Clock::Wall => monotonic_ns(),
            Clock::Virtual(v) => v.now_ns(),
        }
    }

    /// Sleep for a duration. On the virtual clock this advances time instead.
    pub fn sleep(&self, d: Duration) {
        match self {
            Clock::Wall => std::thread::sleep(d),
            Clock::Virtual(v) => v.advance_by(d.as_nanos() as u64),
        }
    }

    pub fn sleep_ms(&self, ms: f64) {
        if ms <= 0.0 {
            return;
        }
        self.sleep(Duration::from_secs_f64(ms / 1_000.0));
    }

    /// Block (or jump) until the clock reads at least `t_ns`.
    pub fn advance_to(&self, t_ns: u64) {
        match self {
            Clock::Wall => {
                let now = monotonic_ns();
                if t_ns > now {
                    std::thread::sleep(Duration::from_nanos(t_ns - now));
                }
            }
            Clock::Virtual(v) => v.advance_to(t_ns),
        }
    }
}

impl std::fmt::Debug for Clock {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Clock::Wall => write!(f, "Clock::Wall"),
            Clock::Virtual(v) => write!(f, "Clock::Virtual(now={})", v.now_ns()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn monotonic_is_nondecreasing() {
        let a = monotonic_ns();
        let b = monotonic_ns();
        assert!(b >= a);
    }

    #[test]
    fn virtual_clock_advances() {
        let c = Clock::new_virtual();
        assert_eq!(c.now_ns(), 0);
        c.sleep(Duration::from_millis(5));
        assert_eq!(c.now_ns(), 5_000_000);
        c.advance_to(3_000_000); // never moves backwards
        assert_eq!(c.now_ns(), 5_000_000);
        c.advance_to(9_000_000);
        assert_eq!(c.now_ns(), 9_000_000);
    }

    #[test]
    fn wall_sleep_roughly_honored() {
        let c = Clock::Wall;
        let t0 = monotonic_ns();
        c.sleep_ms(20.0);
        let elapsed_ms = (monotonic_ns() - t0) as f64 / 1e6;
        assert!(elapsed_ms >= 19.0, "slept only {elapsed_ms} ms");
    }
}
