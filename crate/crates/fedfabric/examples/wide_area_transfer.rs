//! The simulated wide-area transfer service: FIFO admission under a
//! concurrency cap, tickets with queued/active/done timelines, and gets
//! that block until the transfer lands. Runs on the virtual clock, so the
//! whole demo is instant and exactly reproducible.
//!
//! ```bash
//! cargo run --example wide_area_transfer
//! ```

use fedfabric::clock::Clock;
use fedfabric::refcore::{Key128, ObjectKey};
use fedfabric::stores::{NetworkModel, ObjectStore, WideAreaStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let model = NetworkModel {
        request_latency_ms: 500.0,   // transfer-initiation request
        startup_latency_ms: 1_000.0, // per-transfer fixed cost
        bandwidth_bytes_per_s: 50e6, // 50 MB/s sustained
        max_concurrent_transfers: 2,
        jitter_fraction: 0.0,
        rng_seed: 7,
    };
    let clock = Clock::new_virtual();
    let store = WideAreaStore::open(
        "wan-demo".into(),
        dir.path().to_path_buf(),
        model,
        8 << 30,
        clock.clone(),
    )?;

    // Four puts race for two transfer slots.
    let sizes = [10_000_000usize, 50_000_000, 25_000_000, 5_000_000];
    let mut keys = Vec::new();
    for (i, size) in sizes.iter().enumerate() {
        let key = ObjectKey {
            store_id: "wan-demo".into(),
            key: Key128([i as u8 + 1; 16]),
            size_bytes: *size as u64,
        };
        store.put(&key, &vec![i as u8; *size])?;
        let ticket = store.ticket(&key).unwrap();
        println!(
            "put {:>9} bytes at t={:6.2}s -> ticket {:?}",
            size,
            clock.now_ns() as f64 / 1e9,
            ticket.state,
        );
        keys.push(key);
    }

    println!("\nresolving in submission order:");
    for key in &keys {
        let before = clock.now_ns();
        let bytes = store.get(key)?;
        let ticket = store.ticket(key).unwrap();
        println!(
            "get {:>9} bytes: blocked {:6.2}s; transfer ran {:5.2}s..{:5.2}s",
            bytes.len(),
            (clock.now_ns() - before) as f64 / 1e9,
            ticket.start_ns.unwrap() as f64 / 1e9,
            ticket.completion_ns.unwrap() as f64 / 1e9,
        );
    }
    println!(
        "\npeak concurrent transfers: {} (cap 2)",
        store.peak_active_transfers()
    );
    Ok(())
}
