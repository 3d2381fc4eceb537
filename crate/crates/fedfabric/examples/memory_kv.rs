//! The networked memory KV store: a server speaking the length-prefixed
//! binary protocol and a client round-tripping objects through it.
//!
//! ```bash
//! cargo run --example memory_kv
//! ```

use fedfabric::refcore::{Key128, ObjectKey};
use fedfabric::stores::{MemoryKvClient, MemoryKvServer, NetworkModel, ObjectStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let model = NetworkModel {
        request_latency_ms: 1.0,
        ..Default::default()
    };
    let mut server = MemoryKvServer::start("127.0.0.1:0", model, 64 << 20)?;
    println!("kv server on {}", server.local_addr());

    let client = MemoryKvClient::new("kv-demo".into(), server.local_addr().to_string());
    let key = ObjectKey {
        store_id: "kv-demo".into(),
        key: Key128([9; 16]),
        size_bytes: 10_000,
    };
    client.put(&key, &vec![0x5Au8; 10_000])?;
    let bytes = client.get(&key)?;
    println!("round-tripped {} bytes", bytes.len());
    println!("exists: {}", client.exists(&key)?);

    let stats = client.server_stats()?;
    println!(
        "server counters: puts={} gets={} bytes_in={} bytes_out={}",
        stats.puts, stats.gets, stats.bytes_in, stats.bytes_out
    );

    client.delete(&key)?;
    match client.get(&key) {
        Err(e) => println!("after delete: {e}"),
        Ok(_) => unreachable!(),
    }
    server.shutdown();
    Ok(())
}
