//! Role entry points behind the `fedfabric` binary: long-running relay,
//! store, endpoint, and thinker processes, plus scenario and report
//! commands.

use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use log::info;

use crate::bench::{derive_breakdowns, emit_report, load_event_dir, ClockOffsets, EventLog};
use crate::config::RunConfig;
use crate::endpoint::{run_endpoint, EndpointSpec};
use crate::refcore::StoreKind;
use crate::relay::{RelayClient, RelayServer};
use crate::stores::MemoryKvServer;

/// Serve the relay until the shutdown flag flips.
pub fn run_relay_role(cfg: &RunConfig, shutdown: Arc<AtomicBool>) -> Result<()> {
    let server = RelayServer::start(
        &cfg.relay.listen,
        cfg.relay.tiers.clone(),
        cfg.relay.lease_timeout_ms,
    )
    .with_context(|| format!("binding relay on {}", cfg.relay.listen))?;
    info!("relay serving on {}", server.local_addr());
    while !shutdown.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(50));
    }
    drop(server);
    Ok(())
}

/// Serve one memory-kv store until shutdown. Filesystem and wide-area
/// stores have no server process; they are rooted directories.
pub fn run_store_role(cfg: &RunConfig, store_id: &str, shutdown: Arc<AtomicBool>) -> Result<()> {
    let store_cfg = cfg
        .store(store_id)
        .with_context(|| format!("store {store_id} not in config"))?;
    match store_cfg.kind {
        StoreKind::MemoryKv => {
            let addr = store_cfg
                .address
                .as_deref()
                .context("memory-kv store needs an address")?;
            let server =
                MemoryKvServer::start(addr, store_cfg.network.clone(), store_cfg.capacity_bytes)
                    .with_context(|| format!("binding store {store_id} on {addr}"))?;
            info!("store {store_id} serving on {}", server.local_addr());
            while !shutdown.load(Ordering::SeqCst) {
                std::thread::sleep(Duration::from_millis(50));
            }
            drop(server);
            Ok(())
        }
        StoreKind::Filesystem | StoreKind::WideArea => {
            bail!("store {store_id} is directory-backed and needs no server process")
        }
    }
}

/// Run one endpoint until shutdown, logging its events under `out_dir`.
pub fn run_endpoint_role(
    cfg: &RunConfig,
    endpoint_id: &str,
    out_dir: &Path,
    shutdown: Arc<AtomicBool>,
) -> Result<()> {
    let spec = EndpointSpec::from_config(cfg, endpoint_id)?;
    let events = EventLog::create(&out_dir.join(format!("events-endpoint-{endpoint_id}.jsonl")))?;
    let report = run_endpoint(spec, events, Some(out_dir.to_path_buf()), shutdown)?;
    info!("endpoint {endpoint_id} exit: {report:?}");
    std::fs::write(
        out_dir.join(format!("endpoint-{endpoint_id}.json")),
        serde_json::json!({
            "executed": report.executed,
            "posted": report.posted,
            "task_errors": report.task_errors,
            "infra_errors": report.infra_errors,
            "peak_concurrent": report.peak_concurrent,
        })
        .to_string(),
    )?;
    Ok(())
}

/// Run the configured application driver to completion.
pub fn run_thinker_role(cfg: &RunConfig, out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir)?;
    let events = EventLog::create(&out_dir.join("events-thinker.jsonl"))?;

    // Offset sidecar: thinker timestamps are corrected onto the relay clock
    // at analysis time, like every endpoint's.
    let probe = RelayClient::new(cfg.relay.listen.clone());
    if let Ok(offset) = probe.measure_clock_offset(16) {
        let _ = ClockOffsets::write(&out_dir.join("clock-thinker.json"), -offset);
    }

    match cfg.app.kind.as_str() {
        "moldesign" => {
            let outcome = crate::apps::moldesign::run_moldesign(cfg, events, Some(out_dir))?;
            info!(
                "moldesign done: {} sims, {} found, {:.1} node-s spent",
                outcome.simulations_completed, outcome.found_above_threshold,
                outcome.spent_node_seconds
            );
        }
        "finetune" => {
            let outcome = crate::apps::finetune::run_finetune(cfg, events, Some(out_dir))?;
            info!(
                "finetune done: {} structures, rms {:.3} -> {:.3}",
                outcome.structures_added, outcome.pre_finetune_rms, outcome.best_rms
            );
        }
        "noop-bench" => {
            let outcome = crate::apps::noop_bench::run_noop_bench(cfg, events, Some(out_dir))?;
            info!("noop bench done: {} cells", outcome.cells.len());
        }
        other => bail!("unknown app kind {other:?}"),
    }
    Ok(())
}

/// Load a run's event logs, derive metrics, and rewrite the report files.
pub fn run_report(dir: &Path) -> Result<String> {
    let events = load_event_dir(dir).with_context(|| format!("loading {}", dir.display()))?;
    let derived = derive_breakdowns(&events);
    let rows = emit_report(dir, &derived, &[])?;
    let mut text = format!(
        "{} tasks ({} incomplete, {} violations), {} summary rows\n",
        derived.breakdowns.len(),
        derived.incomplete,
        derived.violations.len(),
        rows.len()
    );
    text.push_str(&crate::bench::render_summary_csv(&rows));
    Ok(text)
}

/// Bind-and-release an ephemeral port. Races are possible but harmless at
/// desk scale; callers retry on bind failure.
pub fn pick_free_port() -> u16 {
    let listener = std::net::TcpListener::bind("127.0.0.1:0").expect("bind ephemeral");
    let port = listener.local_addr().unwrap().port();
    drop(listener);
    port
}

static SIGNALLED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_signal(_sig: libc::c_int) {
    SIGNALLED.store(true, Ordering::SeqCst);
}

/// Install SIGTERM/SIGINT handlers that flip the returned flag; role loops
/// poll it and drain.
pub fn install_signal_flag() -> Arc<AtomicBool> {
    // SAFETY: installing a signal handler that only touches an AtomicBool.
    unsafe {
        libc::signal(libc::SIGTERM, on_signal as *const () as libc::sighandler_t);
        libc::signal(libc::SIGINT, on_signal as *const () as libc::sighandler_t);
    }
    let flag = Arc::new(AtomicBool::new(false));
    let out = Arc::clone(&flag);
    std::thread::spawn(move || loop {
        if SIGNALLED.load(Ordering::SeqCst) {
            flag.store(true, Ordering::SeqCst);
            return;
        }
        std::thread::sleep(Duration::from_millis(20));
    });
    out
}
