//! `fedfabric`: long-running fabric roles and the scenario bench driver.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use fedfabric::bench::scenario::{default_scenario_config, run_scenario, SCENARIOS};
use fedfabric::cli;
use fedfabric::config::RunConfig;

#[derive(Parser)]
#[command(
    name = "fedfabric",
    about = "Desk-scale federated task fabric: relay, stores, endpoints, steering, and benchmarks"
)]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the relay service (store-and-forward task routing).
    Relay {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one memory-kv store server.
    Store {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run one endpoint worker pool.
    Endpoint {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        id: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run the steering process (the configured application driver).
    Thinker {
        #[arg(long)]
        config: PathBuf,
        /// Role id, used only for log naming.
        #[arg(long, default_value = "thinker")]
        id: String,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
    /// Run a named benchmark scenario end to end (spawns all roles).
    Bench {
        /// One of: noop_tiering, backend_sweep, moldesign, finetune,
        /// offline_endpoint.
        scenario: String,
        /// Optional run config; a canonical one is generated when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-derive metrics and reports from a run directory's event logs.
    Report { dir: PathBuf },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp_millis()
        .init();
    match run() {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.command {
        Cmd::Relay { config, out } => {
            let cfg = RunConfig::load(&config)?;
            std::fs::create_dir_all(&out)?;
            let shutdown = cli::install_signal_flag();
            cli::run_relay_role(&cfg, shutdown)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Store { config, id, out } => {
            let cfg = RunConfig::load(&config)?;
            std::fs::create_dir_all(&out)?;
            let shutdown = cli::install_signal_flag();
            cli::run_store_role(&cfg, &id, shutdown)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Endpoint { config, id, out } => {
            let cfg = RunConfig::load(&config)?;
            std::fs::create_dir_all(&out)?;
            let shutdown = cli::install_signal_flag();
            cli::run_endpoint_role(&cfg, &id, &out, shutdown)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Thinker { config, id: _, out } => {
            let cfg = RunConfig::load(&config)?;
            cli::run_thinker_role(&cfg, &out)?;
            Ok(ExitCode::SUCCESS)
        }
        Cmd::Bench {
            scenario,
            config,
            out,
        } => {
            if !SCENARIOS.contains(&scenario.as_str()) {
                anyhow::bail!("unknown scenario {scenario:?}; known: {SCENARIOS:?}");
            }
            std::fs::create_dir_all(&out)?;
            let cfg = match config {
                Some(path) => RunConfig::load(&path)?,
                None => default_scenario_config(&scenario, &out, 1)?,
            };
            let bin = std::env::current_exe().context("locating own binary")?;
            let outcome = run_scenario(&scenario, &cfg, &out, &bin)?;
            for a in &outcome.assertions {
                println!(
                    "[{}] {} — {}",
                    if a.pass { "PASS" } else { "FAIL" },
                    a.name,
                    a.detail
                );
            }
            Ok(if outcome.passed() {
                ExitCode::SUCCESS
            } else {
                ExitCode::FAILURE
            })
        }
        Cmd::Report { dir } => {
            let text = cli::run_report(&dir)?;
            println!("{text}");
            Ok(ExitCode::SUCCESS)
        }
    }
}
