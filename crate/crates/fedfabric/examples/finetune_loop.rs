//! The surrogate fine-tuning loop, in-process: sampling tasks grow the
//! audit and uncertainty pools, simulations label drawn structures, the
//! ensemble retrains every 25 new labels, and held-out RMS tracks the
//! improvement over the pre-fine-tune model.
//!
//! ```bash
//! cargo run --example finetune_loop
//! ```

use fedfabric::bench::scenario::finetune_config;
use fedfabric::bench::EventLog;
use fedfabric::endpoint::{EndpointHandle, EndpointSpec};
use fedfabric::relay::RelayServer;
use fedfabric::stores::MemoryKvServer;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    let mut cfg = finetune_config(dir.path(), 3);
    cfg.app.new_structures_budget = 60;

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
        "fine-tuning from {} seed examples until {} new structures are added\n",
        cfg.app.seed_examples, cfg.app.new_structures_budget
    );
    let outcome = fedfabric::apps::finetune::run_finetune(&cfg, EventLog::disabled(), None)?;

    println!("structures added:   {}", outcome.structures_added);
    println!("retrain rounds:     {}", outcome.retrain_rounds);
    println!("held-out RMS per round:");
    for (i, rms) in outcome.rms_per_round.iter().enumerate() {
        println!(
            "  round {i:2}: {rms:8.3}{}",
            if i == 0 { "   (pre-fine-tune)" } else { "" }
        );
    }
    println!(
        "\nbest {:.3} vs pre-fine-tune {:.3} ({}x better)",
        outcome.best_rms,
        outcome.pre_finetune_rms,
        (outcome.pre_finetune_rms / outcome.best_rms) as u64
    );
    println!("\naudit-pool occupancy (every 10th sample):");
    for (added, audit) in outcome.pool_occupancy.iter().step_by(10) {
        println!("  {added:3} added -> audit pool {audit}");
    }

    for ep in endpoints {
        ep.shutdown_and_join()?;
    }
    drop(relay);
    Ok(())
}
