//! Fast end-to-end smokes of the scenario machinery with small profiles.

use std::path::Path;

use fedfabric::bench::scenario::{moldesign_config, run_scenario, MoldesignProfile};

mod common;

fn bin() -> &'static Path {
    Path::new(env!("CARGO_BIN_EXE_fedfabric"))
}

#[test]
fn moldesign_efficacy_profile_runs_and_reports() {
    let _guard = common::fabric_lock();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = moldesign_config(dir.path(), 1, "ucb", MoldesignProfile::Efficacy);
    cfg.validate().unwrap();
    let outcome = run_scenario("moldesign_efficacy", &cfg, &out, bin()).unwrap();
    for a in &outcome.assertions {
        eprintln!("[{}] {} — {}", if a.pass { "PASS" } else { "FAIL" }, a.name, a.detail);
    }
    assert!(outcome.passed(), "efficacy smoke failed");
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("app-metrics.json")).unwrap())
            .unwrap();
    let sims = metrics["simulations_completed"].as_u64().unwrap();
    let found = metrics["found_above_threshold"].as_u64().unwrap();
    let spent = metrics["spent_node_seconds"].as_f64().unwrap();
    let budget = metrics["budget_node_seconds"].as_f64().unwrap();
    eprintln!("sims={sims} found={found} spent={spent:.1} budget={budget}");
    assert!(sims >= 200, "too few simulations ran: {sims}");
    // total simulated compute within one task of the budget
    assert!(
        spent <= budget + 12.0 / 30.0 * 2.0,
        "budget overshot: {spent} vs {budget}"
    );
    assert!(found > 0);
}

#[test]
fn finetune_scenario_improves_heldout_rms() {
    let _guard = common::fabric_lock();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let cfg = fedfabric::bench::scenario::finetune_config(dir.path(), 1);
    cfg.validate().unwrap();
    let outcome = run_scenario("finetune", &cfg, &out, bin()).unwrap();
    for a in &outcome.assertions {
        eprintln!("[{}] {} — {}", if a.pass { "PASS" } else { "FAIL" }, a.name, a.detail);
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("app-metrics.json")).unwrap())
            .unwrap();
    eprintln!(
        "added={} rounds={} pre={} best={}",
        metrics["structures_added"], metrics["retrain_rounds"],
        metrics["pre_finetune_rms"], metrics["best_rms"]
    );
    assert!(outcome.passed(), "finetune smoke failed");
}
