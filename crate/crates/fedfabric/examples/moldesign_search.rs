//! The full UCB-steered search, desk-scale and in-process: relay and KV
//! store on threads, CPU and GPU endpoints as in-process pools, and the
//! moldesign driver steering simulations, retraining rounds, inference
//! fan-out, and queue reprioritization through the fabric.
//!
//! ```bash
//! cargo run --example moldesign_search
//! ```

use fedfabric::bench::scenario::{moldesign_config, MoldesignProfile};
use fedfabric::bench::EventLog;
use fedfabric::endpoint::{EndpointHandle, EndpointSpec};
use fedfabric::relay::RelayServer;
use fedfabric::stores::MemoryKvServer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut cfg = moldesign_config(dir.path(), 1, "ucb", MoldesignProfile::Efficacy);
    // Shrink for a quick demo: ~50 simulations of 400 ms on 8 slots.
    cfg.app.budget_node_seconds = 20.0;

    // Bring the fabric up in-process on the configured addresses.
    let relay = RelayServer::start(
        &cfg.relay.listen,
        cfg.relay.tiers.clone(),
        cfg.relay.lease_timeout_ms,
    )?;
    let kv_cfg = cfg.store("kv-main").unwrap();
    let _kv = MemoryKvServer::start(
        kv_cfg.address.as_deref().unwrap(),
        kv_cfg.network.clone(),
        kv_cfg.capacity_bytes,
    )?;
    let endpoints: Vec<EndpointHandle> = cfg
        .endpoints
        .iter()
        .map(|ep| {
            EndpointHandle::spawn(
                EndpointSpec::from_config(&cfg, &ep.id).unwrap(),
                EventLog::disabled(),
                None,
            )
        })
        .collect();

    println!(
        "searching a pool of {} candidates (threshold = exact 90th percentile of the objective)\n",
        cfg.app.pool_size
    );
    let outcome = fedfabric::apps::moldesign::run_moldesign(&cfg, EventLog::disabled(), None)?;

    println!("selection:            {}", outcome.selection);
    println!("simulations run:      {}", outcome.simulations_completed);
    println!(
        "budget:               {:.1} of {:.1} scaled node-seconds",
        outcome.spent_node_seconds, outcome.budget_node_seconds
    );
    println!("retrain rounds:       {}", outcome.retrain_rounds);
    println!(
        "above-threshold hits: {} of {} in the pool",
        outcome.found_above_threshold, outcome.pool_above_threshold
    );
    println!("\nfound-vs-budget curve (every 10th point):");
    for (spent, found) in outcome.found_curve.iter().step_by(10) {
        println!("  {spent:6.1} node-s  ->  {found:3} found");
    }

    for ep in endpoints {
        ep.shutdown_and_join()?;
    }
    drop(relay);
    Ok(())
}
