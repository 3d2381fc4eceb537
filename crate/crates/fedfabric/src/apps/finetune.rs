//! Surrogate fine-tuning: sampling tasks grow audit/uncertainty pools,
//! simulations label drawn structures, and the ensemble retrains every 25
//! new labels. Success is the held-out RMS dropping below its
//! pre-fine-tune value.

use std::collections::HashMap;
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::Serialize;

use super::moldesign::{register_topics, thinker_resolver, OBJECTIVE_SEED};
use super::objective::ObjectiveParams;
use super::sampling::{
    sample_trajectory, schedule_steps, Frame, FinetuneChoice, SamplePools, TrajectoryConfig,
};
use super::surrogate::{ensemble_std, predict, MemberModel};
use super::tasks::{get_json, put_json, SimOutcome};
use super::Candidate;
use crate::bench::{EventLog, Stage, MARKER_TOPIC};
use crate::config::RunConfig;
use crate::refcore::TaskPayload;
use crate::relay::RelayClient;
use crate::steering::{
    retrain_gate, run_thinker, Agent, AgentCx, AgentEvent, AgentFlow, SteeringError,
    SteeringPolicy, ThinkerDeps, Trigger,
};

#[derive(Debug, Clone, Serialize)]
pub struct FinetuneOutcome {
    pub seed: u64,
    pub pre_finetune_rms: f64,
    pub best_rms: f64,
    pub final_rms: f64,
    pub rms_per_round: Vec<f64>,
    pub structures_added: usize,
    pub retrain_rounds: usize,
    /// (structures added, audit pool size) over the run.
    pub pool_occupancy: Vec<(usize, usize)>,
}

struct FtState {
    objective: ObjectiveParams,
    traj_cfg: TrajectoryConfig,
    pools: SamplePools,
    labeled: Vec<(Vec<f64>, f64)>,
    pending_frames: HashMap<u64, Vec<f64>>,
    members: Vec<MemberModel>,
    collected_members: Vec<MemberModel>,
    heldout: Vec<(Vec<f64>, f64)>,
    pre_rms: f64,
    best_rms: f64,
    rms_per_round: Vec<f64>,
    pool_occupancy: Vec<(usize, usize)>,
    added: usize,
    budget: usize,
    since_train: u64,
    round_counter: usize,
    round_active: bool,
    bootstrap_done: bool,
    refresh_active: bool,
    refresh_frames: HashMap<u64, Frame>,
    refresh_preds: HashMap<u64, Vec<Option<f64>>>,
    refresh_outstanding: usize,
    in_flight_cpu: usize,
    target_in_flight: usize,
    ensemble_size: usize,
    sigma: f64,
    rng: ChaCha8Rng,
    member_seed_base: u64,
    stop_submitting: bool,
}

impl FtState {
    fn ensemble_rms(&self, members: &[MemberModel]) -> f64 {
        let mut sq = 0.0;
        for (x, y) in &self.heldout {
            let mean: f64 =
                members.iter().map(|m| predict(m, x)).sum::<f64>() / members.len() as f64;
            let e = mean - y;
            sq += e * e;
        }
        (sq / self.heldout.len().max(1) as f64).sqrt()
    }
}

fn to_steering(e: super::tasks::TaskError) -> SteeringError {
    SteeringError::Runtime(e.to_string())
}

fn submit_train_round(cx: &AgentCx<FtState>) -> Result<(), SteeringError> {
    let (round, training_set, k, seed_base) = {
        let mut st = cx.state();
        st.round_active = true;
        st.since_train = 0;
        st.round_counter += 1;
        st.collected_members.clear();
        (
            st.round_counter,
            st.labeled.clone(),
            st.ensemble_size,
            st.member_seed_base,
        )
    };
    cx.record_stage(&format!("ml-round-{round}"), MARKER_TOPIC, Stage::Created);
    for k_idx in 0..k {
        let mut payload = TaskPayload::new();
        put_json(&mut payload, "examples", &training_set).map_err(to_steering)?;
        let member_seed = seed_base + (round as u64) * 1_000 + k_idx as u64;
        payload.set_meta("member_seed", member_seed.to_string());
        payload.set_meta("seed", member_seed.to_string());
        cx.submit_task("train", payload)?;
    }
    Ok(())
}

/// Keep the CPU pipeline full: pick sampling or simulation per the pool
/// controller and submit until the in-flight target is met.
fn refill_cpu(cx: &AgentCx<FtState>) -> Result<(), SteeringError> {
    loop {
        enum Next {
            Sample { start: Frame, n_steps: usize, members: Vec<MemberModel> },
            Simulate { frame: Frame, provenance: &'static str },
        }
        let next = {
            let mut st = cx.state();
            if st.stop_submitting
                || st.added >= st.budget
                || st.in_flight_cpu >= st.target_in_flight
                || st.members.is_empty()
            {
                None
            } else {
                let choice = st.pools.select_next();
                let next = match choice {
                    FinetuneChoice::Sample => {
                        let id = st.pools.next_frame_id();
                        let dim = st.objective.dim;
                        let features: Vec<f64> =
                            (0..dim).map(|_| st.rng.gen_range(-1.0..1.0)).collect();
                        let progress = st.added as f64 / st.budget.max(1) as f64;
                        Next::Sample {
                            start: Frame { id, features },
                            n_steps: schedule_steps(progress),
                            members: st.members.clone(),
                        }
                    }
                    FinetuneChoice::SimulateAudit(frame) => {
                        st.pending_frames.insert(frame.id, frame.features.clone());
                        Next::Simulate {
                            frame,
                            provenance: "audit",
                        }
                    }
                    FinetuneChoice::SimulateUncertainty(frame) => {
                        st.pending_frames.insert(frame.id, frame.features.clone());
                        Next::Simulate {
                            frame,
                            provenance: "uncertainty",
                        }
                    }
                };
                st.in_flight_cpu += 1;
                Some(next)
            }
        };
        match next {
            None => return Ok(()),
            Some(Next::Sample {
                start,
                n_steps,
                members,
            }) => {
                let mut payload = TaskPayload::new();
                put_json(&mut payload, "members", &members).map_err(to_steering)?;
                put_json(&mut payload, "start", &start).map_err(to_steering)?;
                payload.set_meta("n_steps", n_steps.to_string());
                payload.set_meta("seed", start.id.to_string());
                if let Err(e) = cx.submit_task("sample", payload) {
                    cx.state().in_flight_cpu -= 1;
                    return Err(e);
                }
            }
            Some(Next::Simulate { frame, provenance }) => {
                let mut payload = TaskPayload::new();
                put_json(
                    &mut payload,
                    "candidate",
                    &Candidate {
                        id: frame.id,
                        features: frame.features.clone(),
                    },
                )
                .map_err(to_steering)?;
                payload.set_meta("seed", frame.id.to_string());
                payload.set_meta("provenance", provenance);
                if let Err(e) = cx.submit_task("simulate", payload) {
                    cx.state().in_flight_cpu -= 1;
                    return Err(e);
                }
            }
        }
    }
}

fn maybe_stop(cx: &AgentCx<FtState>) -> AgentFlow {
    let st = cx.state();
    if st.added >= st.budget
        && st.in_flight_cpu == 0
        && !st.round_active
        && !st.refresh_active
    {
        AgentFlow::Stop
    } else {
        AgentFlow::Continue
    }
}

fn bootstrap_agent(seed: u64, seed_examples: usize) -> Agent<FtState> {
    Agent::new("bootstrap", Trigger::OnStart, move |cx: &AgentCx<FtState>, event| {
        let AgentEvent::Start = event else {
            return Ok(AgentFlow::Continue);
        };
        {
            let mut st = cx.state();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xb007);
            let noise = Normal::new(0.0, st.sigma.max(1e-12)).expect("normal");
            let dim = st.objective.dim;
            for _ in 0..seed_examples {
                let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let mut y = st.objective.value(&x);
                if st.sigma > 0.0 {
                    y += noise.sample(&mut rng);
                }
                st.labeled.push((x, y));
            }
        }
        submit_train_round(cx)?;
        Ok(AgentFlow::Continue)
    })
}

fn train_collect_agent() -> Agent<FtState> {
    Agent::new(
        "train-collect",
        Trigger::OnResult("train".into()),
        move |cx: &AgentCx<FtState>, event| {
            let AgentEvent::Result(result) = event else {
                return Ok(AgentFlow::Continue);
            };
            if result.envelope.status != crate::relay::ResultStatus::Success {
                return Err(SteeringError::Runtime(format!(
                    "training task {} failed: {:?}",
                    result.task_id, result.envelope.message
                )));
            }
            let restored = cx.resolve_result(&result)?;
            let member: MemberModel = get_json(&restored, "member").map_err(to_steering)?;

            let installed = {
                let mut st = cx.state();
                st.collected_members.push(member);
                if st.collected_members.len() == st.ensemble_size {
                    st.members = st.collected_members.clone();
                    st.round_active = false;
                    Some(st.round_counter)
                } else {
                    None
                }
            };
            let Some(round) = installed else {
                return Ok(AgentFlow::Continue);
            };
            cx.record_stage(&format!("ml-round-{round}"), MARKER_TOPIC, Stage::DecisionMade);

            let bootstrap_now = {
                let mut st = cx.state();
                if !st.bootstrap_done {
                    st.bootstrap_done = true;
                    true
                } else {
                    false
                }
            };
            if bootstrap_now {
                // Build the fixed held-out set from trajectories of the
                // *initial* ensemble, labeled exactly; it never enters the
                // training set.
                let mut st = cx.state();
                let members = st.members.clone();
                let mut ho_rng = ChaCha8Rng::seed_from_u64(999);
                let dim = st.objective.dim;
                let mut heldout = Vec::new();
                for _ in 0..12 {
                    let start: Vec<f64> = (0..dim).map(|_| ho_rng.gen_range(-1.0..1.0)).collect();
                    let frames =
                        sample_trajectory(&members, &start, 200, ho_rng.gen(), &st.traj_cfg);
                    for frame in frames.into_iter().step_by(20) {
                        let y = st.objective.value(&frame);
                        heldout.push((frame, y));
                    }
                }
                st.heldout = heldout;
                st.pre_rms = st.ensemble_rms(&members);
                st.best_rms = st.pre_rms;
                let pre = st.pre_rms;
                st.rms_per_round.push(pre);
            } else {
                let mut st = cx.state();
                let members = st.members.clone();
                let rms = st.ensemble_rms(&members);
                st.best_rms = st.best_rms.min(rms);
                st.rms_per_round.push(rms);
            }
            refill_cpu(cx)?;
            Ok(maybe_stop(cx))
        },
    )
}

fn sample_collect_agent() -> Agent<FtState> {
    Agent::new(
        "sample-collect",
        Trigger::OnResult("sample".into()),
        move |cx: &AgentCx<FtState>, event| {
            let AgentEvent::Result(result) = event else {
                return Ok(AgentFlow::Continue);
            };
            if result.envelope.status != crate::relay::ResultStatus::Success {
                return Err(SteeringError::Runtime(format!(
                    "sampling task {} failed: {:?}",
                    result.task_id, result.envelope.message
                )));
            }
            let restored = cx.resolve_result(&result)?;
            let frames: Vec<Frame> = get_json(&restored, "frames").map_err(to_steering)?;

            let refresh = {
                let mut st = cx.state();
                st.in_flight_cpu = st.in_flight_cpu.saturating_sub(1);
                st.pools.record_trajectory(frames);
                let occupancy = (st.added, st.pools.audit_len());
                st.pool_occupancy.push(occupancy);
                if st.pools.needs_refresh() && !st.refresh_active && !st.members.is_empty() {
                    st.refresh_active = true;
                    let to_score = st.pools.begin_refresh();
                    st.refresh_frames = to_score.iter().map(|f| (f.id, f.clone())).collect();
                    st.refresh_preds = to_score
                        .iter()
                        .map(|f| (f.id, vec![None; st.ensemble_size]))
                        .collect();
                    Some((st.members.clone(), to_score))
                } else {
                    None
                }
            };

            if let Some((members, frames)) = refresh {
                // Uncertainty ranking runs as inference tasks on the GPU
                // endpoint, one chunk per member.
                let chunk: Vec<Candidate> = frames
                    .iter()
                    .map(|f| Candidate {
                        id: f.id,
                        features: f.features.clone(),
                    })
                    .collect();
                cx.state().refresh_outstanding = members.len();
                for (member_idx, member) in members.iter().enumerate() {
                    let mut payload = TaskPayload::new();
                    put_json(&mut payload, "member", member).map_err(to_steering)?;
                    put_json(&mut payload, "candidates", &chunk).map_err(to_steering)?;
                    payload.set_meta("member_idx", member_idx.to_string());
                    payload.set_meta("purpose", "refresh");
                    payload.set_meta("seed", member_idx.to_string());
                    cx.submit_task("infer", payload)?;
                }
            }
            refill_cpu(cx)?;
            Ok(maybe_stop(cx))
        },
    )
}

fn sim_collect_agent() -> Agent<FtState> {
    Agent::new(
        "sim-collect",
        Trigger::OnResult("simulate".into()),
        move |cx: &AgentCx<FtState>, event| {
            let AgentEvent::Result(result) = event else {
                return Ok(AgentFlow::Continue);
            };
            if result.envelope.status != crate::relay::ResultStatus::Success {
                return Err(SteeringError::Runtime(format!(
                    "simulation {} failed: {:?}",
                    result.task_id, result.envelope.message
                )));
            }
            let restored = cx.resolve_result(&result)?;
            let outcome: SimOutcome = get_json(&restored, "result").map_err(to_steering)?;

            let open_round = {
                let mut st = cx.state();
                st.in_flight_cpu = st.in_flight_cpu.saturating_sub(1);
                let features = st
                    .pending_frames
                    .remove(&outcome.candidate_id)
                    .unwrap_or_default();
                st.labeled.push((features, outcome.label));
                st.added += 1;
                st.since_train += 1;
                let occupancy = (st.added, st.pools.audit_len());
                st.pool_occupancy.push(occupancy);
                !st.round_active
                    && retrain_gate(cx.policy().retrain_trigger, st.since_train)
            };
            if open_round {
                submit_train_round(cx)?;
            }
            refill_cpu(cx)?;
            Ok(maybe_stop(cx))
        },
    )
}

fn refresh_collect_agent() -> Agent<FtState> {
    Agent::new(
        "refresh-collect",
        Trigger::OnResult("infer".into()),
        move |cx: &AgentCx<FtState>, event| {
            let AgentEvent::Result(result) = event else {
                return Ok(AgentFlow::Continue);
            };
            if result.envelope.status != crate::relay::ResultStatus::Success {
                return Err(SteeringError::Runtime(format!(
                    "inference task {} failed: {:?}",
                    result.task_id, result.envelope.message
                )));
            }
            let restored = cx.resolve_result(&result)?;
            let member_idx: usize = restored
                .meta("member_idx")
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| SteeringError::Runtime("missing member_idx".into()))?;
            let predictions: Vec<(u64, f64)> =
                get_json(&restored, "predictions").map_err(to_steering)?;

            {
                let mut st = cx.state();
                for (id, p) in predictions {
                    if let Some(row) = st.refresh_preds.get_mut(&id) {
                        row[member_idx] = Some(p);
                    }
                }
                st.refresh_outstanding = st.refresh_outstanding.saturating_sub(1);
                if st.refresh_outstanding == 0 && st.refresh_active {
                    // Variance per frame over members, top-V into the pool.
                    let ids: Vec<u64> = st.refresh_preds.keys().copied().collect();
                    let k = st.ensemble_size;
                    let mut scored = Vec::with_capacity(ids.len());
                    if !ids.is_empty() {
                        let mut per_member: Vec<Vec<f64>> =
                            vec![Vec::with_capacity(ids.len()); k];
                        for id in &ids {
                            let row = &st.refresh_preds[id];
                            for (m, slot) in per_member.iter_mut().enumerate() {
                                slot.push(row[m].unwrap_or(0.0));
                            }
                        }
                        let stds = ensemble_std(&per_member);
                        for (id, std) in ids.iter().zip(stds) {
                            if let Some(frame) = st.refresh_frames.remove(id) {
                                scored.push((frame, std * std));
                            }
                        }
                    }
                    st.pools.finish_refresh(scored);
                    st.refresh_active = false;
                    st.refresh_preds.clear();
                    st.refresh_frames.clear();
                }
            }
            refill_cpu(cx)?;
            Ok(maybe_stop(cx))
        },
    )
}

/// Drive the fine-tuning loop through the fabric.
pub fn run_finetune(
    cfg: &RunConfig,
    events: Arc<EventLog>,
    out_dir: Option<&Path>,
) -> Result<FinetuneOutcome, SteeringError> {
    let policy = SteeringPolicy::from_config(&cfg.policy).map_err(SteeringError::Runtime)?;
    let client = RelayClient::new(cfg.relay.listen.clone());
    let routes = register_topics(cfg, &client)?;
    let resolver = thinker_resolver(cfg)?;

    let sim_route = routes
        .get("simulate")
        .ok_or_else(|| SteeringError::UnknownTopic("simulate".into()))?;
    let cpu_slots = cfg
        .endpoint(&sim_route.endpoint_id.0)
        .map(|e| e.worker_slots)
        .unwrap_or(1);

    let seed = cfg.run.seed;
    let state = FtState {
        objective: ObjectiveParams::from_seed(OBJECTIVE_SEED, cfg.app.feature_dim),
        traj_cfg: TrajectoryConfig::default(),
        pools: SamplePools::new(cfg.app.audit_pool_target, cfg.app.uncertainty_pool_cap),
        labeled: Vec::new(),
        pending_frames: HashMap::new(),
        members: Vec::new(),
        collected_members: Vec::new(),
        heldout: Vec::new(),
        pre_rms: f64::NAN,
        best_rms: f64::NAN,
        rms_per_round: Vec::new(),
        pool_occupancy: Vec::new(),
        added: 0,
        budget: cfg.app.new_structures_budget,
        since_train: 0,
        round_counter: 0,
        round_active: false,
        bootstrap_done: false,
        refresh_active: false,
        refresh_frames: HashMap::new(),
        refresh_preds: HashMap::new(),
        refresh_outstanding: 0,
        in_flight_cpu: 0,
        target_in_flight: cpu_slots + policy.simulation_backlog_k,
        ensemble_size: policy.ensemble_size,
        sigma: cfg.app.sigma,
        rng: ChaCha8Rng::seed_from_u64(seed ^ 0xf17e),
        member_seed_base: seed.wrapping_mul(1_000).wrapping_add(500_000),
        stop_submitting: false,
    };

    let agents = vec![
        bootstrap_agent(seed, cfg.app.seed_examples),
        train_collect_agent(),
        sample_collect_agent(),
        sim_collect_agent(),
        refresh_collect_agent(),
    ];
    let deps = ThinkerDeps {
        relay_addr: cfg.relay.listen.clone(),
        events,
        routes,
        proxy_policy: cfg
            .proxy_policy()
            .map_err(|e| SteeringError::Runtime(e.to_string()))?,
        resolver,
        policy,
        drain_timeout: std::time::Duration::from_secs(60),
    };
    let final_state = run_thinker(agents, state, deps)?;

    let outcome = FinetuneOutcome {
        seed,
        pre_finetune_rms: final_state.pre_rms,
        best_rms: final_state.best_rms,
        final_rms: final_state.rms_per_round.last().copied().unwrap_or(f64::NAN),
        rms_per_round: final_state.rms_per_round,
        structures_added: final_state.added,
        retrain_rounds: final_state.round_counter,
        pool_occupancy: final_state.pool_occupancy,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .and_then(|_| {
                std::fs::write(
                    dir.join("app-metrics.json"),
                    serde_json::to_vec_pretty(&outcome).unwrap(),
                )
            })
            .map_err(|e| SteeringError::Runtime(format!("writing app metrics: {e}")))?;
    }
    Ok(outcome)
}
