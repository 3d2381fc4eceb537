//! Pass-by-reference basics: place a large payload in a store, ship a tiny
//! reference instead of the bytes, and resolve it lazily on first use.
//!
//! ```bash
//! cargo run --example proxy_roundtrip
//! ```

use std::sync::Arc;

use fedfabric::clock::Clock;
use fedfabric::refcore::{
    proxy, restore, scan_and_proxy, ProxyPolicy, ResolveCache, Resolver, StoreRegistry,
    TaskPayload, Threshold, TopicRule,
};
use fedfabric::stores::{FilesystemStore, NetworkModel, ObjectStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let store: Arc<dyn ObjectStore> = Arc::new(FilesystemStore::open(
        "fs-demo".into(),
        dir.path().to_path_buf(),
        NetworkModel::default(),
        1 << 30,
        Clock::Wall,
    )?);
    let registry = Arc::new(StoreRegistry::new());
    registry.register(Arc::clone(&store));
    let resolver = Resolver::new(Arc::clone(&registry), Arc::new(ResolveCache::default()));

    // Direct proxy/resolve of one object.
    let megabyte = vec![0xABu8; 1_000_000];
    let reference = proxy(&megabyte, &store)?;
    println!(
        "proxied 1 MB -> reference of {} bytes (key {})",
        reference.encode().len(),
        reference.object_key.key
    );
    let resolved = resolver.resolve(&reference)?;
    println!(
        "resolved {} bytes, digest verified, cache now holds it",
        resolved.len()
    );
    let again = resolver.resolve(&reference)?;
    println!(
        "second resolve: {} bytes from cache ({} store fetches total)",
        again.len(),
        resolver.cache().stats().fetches
    );

    // Payload scanning: fields above the topic threshold become references.
    let mut payload = TaskPayload::new();
    payload.push_inline("small-config", vec![1u8; 512])?;
    payload.push_inline("big-tensor", vec![2u8; 300_000])?;
    let policy = ProxyPolicy::new(TopicRule {
        threshold: Threshold::Bytes(20_000),
        store_id: "fs-demo".into(),
    });
    let proxied = scan_and_proxy(&payload, &policy, "demo-topic", &registry)?;
    for field in proxied.fields() {
        println!(
            "field {:12} -> {}",
            field.name,
            if field.value.is_reference() {
                "reference".to_owned()
            } else {
                format!("{} inline bytes", field.value.inline_len().unwrap())
            }
        );
    }
    println!(
        "payload {} bytes on the wire instead of {}",
        proxied.encoded_len(),
        payload.encoded_len()
    );

    let restored = restore(&proxied, &resolver)?;
    assert_eq!(restored, payload);
    println!("restore(scan_and_proxy(p)) == p holds");
    Ok(())
}
