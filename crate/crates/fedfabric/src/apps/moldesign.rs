//! UCB-steered molecular-design-style search over a fixed candidate pool.
//!
//! Agents:
//! * a seeder that fills the candidate queue and submits the initial
//!   simulations (worker slots + backlog),
//! * a simulation-chaining agent that reacts to each completed simulation
//!   by popping the queue head and submitting the next task — without ever
//!   touching result data,
//! * a data agent that resolves result payloads, grows the training set,
//!   and opens retrain rounds,
//! * collectors that assemble the trained ensemble, fan out inference
//!   chunks, and reprioritize the queue from fresh UCB scores.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::objective::CandidatePool;
use super::surrogate::{ucb_scores, MemberModel};
use super::tasks::{get_json, put_json, FunctionParams};
use super::tasks::SimOutcome;
use super::Candidate;
use crate::bench::{EventLog, Stage, MARKER_TOPIC};
use crate::config::RunConfig;
use crate::refcore::{Resolver, StoreRegistry, TaskPayload};
use crate::relay::RelayClient;
use crate::steering::{
    retrain_gate, run_thinker, Agent, AgentCx, AgentEvent, AgentFlow, PrioritizedTaskQueue,
    SteeringError, SteeringPolicy, ThinkerDeps, TopicRoute, Trigger,
};
use crate::stores::open_store;

/// The fixed seed shaping the synthetic objective; run seeds vary the pool
/// and steering randomness, not the landscape.
pub const OBJECTIVE_SEED: u64 = 42;

#[derive(Debug, Clone, Serialize)]
pub struct MoldesignOutcome {
    pub selection: String,
    pub seed: u64,
    pub threshold: f64,
    pub pool_above_threshold: usize,
    pub simulations_completed: usize,
    pub found_above_threshold: usize,
    pub spent_node_seconds: f64,
    pub budget_node_seconds: f64,
    pub retrain_rounds: usize,
    pub backlog_violations: usize,
    /// (scaled node-seconds spent, candidates found) after each simulation.
    pub found_curve: Vec<(f64, usize)>,
}

struct MolState {
    pool: Arc<CandidatePool>,
    queue: Arc<PrioritizedTaskQueue<u64>>,
    labeled: Vec<(Vec<f64>, f64)>,
    pending_features: HashMap<u64, Vec<f64>>,
    in_flight_sims: usize,
    sims_completed: usize,
    spent_node_s: f64,
    budget_node_s: f64,
    est_task_s: f64,
    target_in_flight: usize,
    new_since_train: u64,
    round_active: bool,
    round_counter: usize,
    collected_members: Vec<MemberModel>,
    preds: HashMap<u64, Vec<Option<f64>>>,
    infer_outstanding: usize,
    found: usize,
    found_curve: Vec<(f64, usize)>,
    /// Per retrain round, inference resolve times in arrival order.
    infer_resolve_rounds: Vec<Vec<f64>>,
    /// Times the in-flight count missed slots + backlog right after a
    /// decision while candidates and budget remained.
    backlog_violations: usize,
    ucb_mode: bool,
    stop_submitting: bool,
    member_seed_base: u64,
    ensemble_size: usize,
    chunk_size: usize,
}

impl MolState {
    fn budget_allows_one_more(&self) -> bool {
        let planned = self.spent_node_s + (self.in_flight_sims as f64 + 1.0) * self.est_task_s;
        planned <= self.budget_node_s + self.est_task_s
    }

    fn refill_paused(&self, policy: &SteeringPolicy) -> bool {
        self.round_active && policy.retrain_trigger.pauses_refill()
    }
}

fn to_steering(e: super::tasks::TaskError) -> SteeringError {
    SteeringError::Runtime(e.to_string())
}

fn submit_simulation(
    cx: &AgentCx<MolState>,
    candidate: Candidate,
    seed: u64,
) -> Result<(), SteeringError> {
    let mut payload = TaskPayload::new();
    put_json(&mut payload, "candidate", &candidate).map_err(to_steering)?;
    payload.set_meta("seed", seed.to_string());
    cx.submit_task("simulate", payload)?;
    Ok(())
}

/// Refill simulations up to the in-flight target. Pops and submits one at
/// a time so the state lock is never held across a submission.
fn refill_sims(cx: &AgentCx<MolState>, seed_base: u64) -> Result<(), SteeringError> {
    loop {
        let next = {
            let mut st = cx.state();
            if st.stop_submitting
                || st.refill_paused(cx.policy())
                || st.in_flight_sims >= st.target_in_flight
                || !st.budget_allows_one_more()
            {
                None
            } else {
                match st.queue.pop() {
                    Some(id) => {
                        let candidate = st.pool.candidates[id as usize].clone();
                        st.in_flight_sims += 1;
                        st.pending_features
                            .insert(candidate.id, candidate.features.clone());
                        Some(candidate)
                    }
                    None => None,
                }
            }
        };
        match next {
            Some(candidate) => {
                let id = candidate.id;
                if let Err(e) = submit_simulation(cx, candidate, seed_base ^ id) {
                    cx.state().in_flight_sims -= 1;
                    return Err(e);
                }
            }
            None => return Ok(()),
        }
    }
}

fn maybe_stop(cx: &AgentCx<MolState>) -> AgentFlow {
    let st = cx.state();
    let exhausted =
        st.stop_submitting || !st.budget_allows_one_more() || (st.queue.is_empty() && !st.round_active);
    if exhausted && st.in_flight_sims == 0 && st.infer_outstanding == 0 && !st.round_active {
        AgentFlow::Stop
    } else {
        AgentFlow::Continue
    }
}

/// The latency-critical decision: on a completed simulation, pop the queue
/// head and chain the next submission without reading any result bytes.
fn simulation_chain_agent(seed_base: u64) -> Agent<MolState> {
    Agent::new(
        "sim-chain",
        Trigger::OnResult("simulate".into()),
        move |cx: &AgentCx<MolState>, event| {
            let AgentEvent::Result(result) = event else {
                return Ok(AgentFlow::Continue);
            };
            {
                let mut st = cx.state();
                st.in_flight_sims = st.in_flight_sims.saturating_sub(1);
                st.sims_completed += 1;
                st.spent_node_s += result.envelope.timings.execute_ms() / 1e3;
            }
            let decided = {
                let st = cx.state();
                !st.stop_submitting
                    && !st.refill_paused(cx.policy())
                    && st.budget_allows_one_more()
                    && !st.queue.is_empty()
            };
            cx.record_stage(&result.task_id.0, &result.topic, Stage::DecisionMade);
            if decided {
                cx.record_stage(&result.task_id.0, &result.topic, Stage::NextSubmitted);
            }
            refill_sims(cx, seed_base)?;
            {
                // Backlog law: immediately after a decision, a nonempty
                // queue must leave in-flight at slots + backlog.
                let mut st = cx.state();
                if !st.queue.is_empty()
                    && !st.stop_submitting
                    && !st.refill_paused(cx.policy())
                    && st.budget_allows_one_more()
                    && st.in_flight_sims < st.target_in_flight
                {
                    st.backlog_violations += 1;
                }
            }
            Ok(maybe_stop(cx))
        },
    )
}

fn data_agent() -> Agent<MolState> {
    Agent::new(
        "sim-data",
        Trigger::OnResult("simulate".into()),
        move |cx: &AgentCx<MolState>, event| {
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

            let round_to_open = {
                let mut st = cx.state();
                let features = st
                    .pending_features
                    .remove(&outcome.candidate_id)
                    .unwrap_or_default();
                if outcome.label > st.pool.threshold {
                    st.found += 1;
                }
                let point = (st.spent_node_s, st.found);
                st.found_curve.push(point);
                st.labeled.push((features, outcome.label));
                st.new_since_train += 1;

                let gate = st.ucb_mode
                    && !st.round_active
                    && st.labeled.len() >= 2
                    && !st.stop_submitting
                    && retrain_gate(cx.policy().retrain_trigger, st.new_since_train);
                if gate {
                    st.round_active = true;
                    st.new_since_train = 0;
                    st.round_counter += 1;
                    st.collected_members.clear();
                    st.infer_resolve_rounds.push(Vec::new());
                    Some((st.round_counter, st.labeled.clone()))
                } else {
                    None
                }
            };

            if let Some((round, training_set)) = round_to_open {
                let marker = format!("ml-round-{round}");
                cx.record_stage(&marker, MARKER_TOPIC, Stage::Created);
                let (ensemble_size, seed_base) = {
                    let st = cx.state();
                    (st.ensemble_size, st.member_seed_base)
                };
                for k in 0..ensemble_size {
                    let mut payload = TaskPayload::new();
                    put_json(&mut payload, "examples", &training_set).map_err(to_steering)?;
                    let member_seed = seed_base + (round as u64) * 1_000 + k as u64;
                    payload.set_meta("member_seed", member_seed.to_string());
                    payload.set_meta("seed", member_seed.to_string());
                    cx.submit_task("train", payload)?;
                }
            }
            Ok(maybe_stop(cx))
        },
    )
}

fn train_collect_agent() -> Agent<MolState> {
    Agent::new(
        "train-collect",
        Trigger::OnResult("train".into()),
        move |cx: &AgentCx<MolState>, event| {
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

            let ready = {
                let mut st = cx.state();
                st.collected_members.push(member);
                if st.collected_members.len() == st.ensemble_size {
                    let remaining: Vec<u64> =
                        st.queue.snapshot().into_iter().map(|(id, _)| id).collect();
                    let chunk_size = st.chunk_size;
                    let chunks: Vec<Vec<Candidate>> = remaining
                        .chunks(chunk_size)
                        .map(|ids| {
                            ids.iter()
                                .map(|id| st.pool.candidates[*id as usize].clone())
                                .collect()
                        })
                        .collect();
                    st.preds.clear();
                    let k = st.ensemble_size;
                    for id in &remaining {
                        st.preds.insert(*id, vec![None; k]);
                    }
                    st.infer_outstanding = chunks.len() * st.ensemble_size;
                    Some((st.collected_members.clone(), chunks))
                } else {
                    None
                }
            };

            if let Some((members, chunks)) = ready {
                if chunks.is_empty() {
                    cx.state().round_active = false;
                    return Ok(maybe_stop(cx));
                }
                for (member_idx, member) in members.iter().enumerate() {
                    for (chunk_idx, chunk) in chunks.iter().enumerate() {
                        let mut payload = TaskPayload::new();
                        put_json(&mut payload, "member", member).map_err(to_steering)?;
                        put_json(&mut payload, "candidates", chunk).map_err(to_steering)?;
                        payload.set_meta("member_idx", member_idx.to_string());
                        payload.set_meta("seed", format!("{}", member_idx * 10_000 + chunk_idx));
                        cx.submit_task("infer", payload)?;
                    }
                }
            }
            Ok(AgentFlow::Continue)
        },
    )
}

fn infer_collect_agent(seed_base: u64) -> Agent<MolState> {
    Agent::new(
        "infer-collect",
        Trigger::OnResult("infer".into()),
        move |cx: &AgentCx<MolState>, event| {
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

            let round_done = {
                let mut st = cx.state();
                let resolve_ms = result.envelope.timings.resolve_ms();
                if let Some(round) = st.infer_resolve_rounds.last_mut() {
                    round.push(resolve_ms);
                }
                for (id, p) in predictions {
                    if let Some(row) = st.preds.get_mut(&id) {
                        row[member_idx] = Some(p);
                    }
                }
                st.infer_outstanding = st.infer_outstanding.saturating_sub(1);
                if st.infer_outstanding == 0 {
                    let ids: Vec<u64> = st.preds.keys().copied().collect();
                    let k = st.ensemble_size;
                    let scores = if ids.is_empty() {
                        HashMap::new()
                    } else {
                        let mut per_member: Vec<Vec<f64>> =
                            vec![Vec::with_capacity(ids.len()); k];
                        for id in &ids {
                            let row = &st.preds[id];
                            for (m, slot) in per_member.iter_mut().enumerate() {
                                slot.push(row[m].unwrap_or(0.0));
                            }
                        }
                        let ucb = ucb_scores(&per_member);
                        ids.iter().copied().zip(ucb).collect::<HashMap<u64, f64>>()
                    };
                    st.queue.reprioritize(&scores);
                    st.round_active = false;
                    Some(st.round_counter)
                } else {
                    None
                }
            };

            if let Some(round) = round_done {
                let marker = format!("ml-round-{round}");
                cx.record_stage(&marker, MARKER_TOPIC, Stage::DecisionMade);
                // Fresh scores are live again; refills resume (they were
                // suppressed during the round under batch-pause).
                refill_sims(cx, seed_base)?;
            }
            Ok(maybe_stop(cx))
        },
    )
}

fn seeder_agent(seed: u64) -> Agent<MolState> {
    Agent::new("seeder", Trigger::OnStart, move |cx: &AgentCx<MolState>, event| {
        let AgentEvent::Start = event else {
            return Ok(AgentFlow::Continue);
        };
        {
            let st = cx.state();
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            // Initial order is random in both modes; UCB reprioritizes as
            // ensembles arrive, the random baseline never does.
            let entries: Vec<(u64, f64)> = st
                .pool
                .candidates
                .iter()
                .map(|c| (c.id, rng.gen_range(0.0..1.0)))
                .collect();
            st.queue.extend(entries);
        }
        refill_sims(cx, seed)?;
        Ok(AgentFlow::Continue)
    })
}

/// Scaled function parameter blocks for every builtin this run registers.
pub fn function_params(cfg: &RunConfig) -> BTreeMap<String, FunctionParams> {
    use super::tasks::DurationModel;
    let app = &cfg.app;
    let ts = cfg.run.time_scale;
    let ds = cfg.run.data_scale;
    let pool = app.pool_size.max(1) as f64;
    let chunks = (pool / cfg.policy.inference_chunk_size as f64).ceil().max(1.0);
    let k = cfg.policy.ensemble_size.max(1) as f64;
    let mut out = BTreeMap::new();
    out.insert(
        "simulate".to_owned(),
        FunctionParams {
            duration: DurationModel::Constant {
                ms: app.simulate_duration_s * ts * 1e3,
            },
            output_padding_bytes: (app.simulate_output_bytes as f64 * ds) as u64,
            objective_seed: OBJECTIVE_SEED,
            dim: app.feature_dim,
            sigma: app.sigma,
            ..Default::default()
        },
    );
    out.insert(
        "train".to_owned(),
        FunctionParams {
            duration: DurationModel::Constant {
                ms: app.train_duration_s * ts * 1e3,
            },
            output_padding_bytes: (app.train_output_bytes as f64 * ds) as u64,
            dim: app.feature_dim,
            ..Default::default()
        },
    );
    out.insert(
        "infer".to_owned(),
        FunctionParams {
            duration: DurationModel::Constant {
                ms: app.infer_full_pool_s * (cfg.policy.inference_chunk_size as f64 / pool) * ts
                    * 1e3,
            },
            output_padding_bytes: (app.infer_roundtrip_bytes as f64 * ds / (k * chunks) / 2.0)
                as u64,
            dim: app.feature_dim,
            ..Default::default()
        },
    );
    out.insert(
        "sample".to_owned(),
        FunctionParams {
            duration: DurationModel::Constant {
                ms: app.sample_duration_s * ts * 1e3,
            },
            output_padding_bytes: (app.sample_output_bytes as f64 * ds) as u64,
            dim: app.feature_dim,
            ..Default::default()
        },
    );
    out.insert("noop".to_owned(), FunctionParams::default());
    out.insert("fail".to_owned(), FunctionParams::default());
    out
}

/// Register every configured topic's function and build the routing table.
pub fn register_topics(
    cfg: &RunConfig,
    client: &RelayClient,
) -> Result<BTreeMap<String, TopicRoute>, SteeringError> {
    let params = function_params(cfg);
    let mut routes = BTreeMap::new();
    for topic in &cfg.topics {
        let p = params
            .get(&topic.function)
            .cloned()
            .unwrap_or_default()
            .to_json();
        let function_id = client.register_function(&topic.function, &topic.function, &p)?;
        let ep = cfg
            .endpoint(&topic.endpoint)
            .ok_or_else(|| SteeringError::UnknownTopic(topic.endpoint.clone()))?;
        routes.insert(
            topic.name.clone(),
            TopicRoute {
                endpoint_id: crate::relay::EndpointId(topic.endpoint.clone()),
                function_id,
                endpoint_kind: ep.resource_kind,
            },
        );
    }
    Ok(routes)
}

/// Open every configured store into a thinker-side resolver.
pub fn thinker_resolver(cfg: &RunConfig) -> Result<Resolver, SteeringError> {
    let registry = Arc::new(StoreRegistry::new());
    for store_cfg in &cfg.stores {
        let store = open_store(store_cfg, crate::clock::Clock::Wall)
            .map_err(|e| SteeringError::Runtime(format!("opening store {}: {e}", store_cfg.id)))?;
        registry.register(store);
    }
    let cache = Arc::new(crate::refcore::ResolveCache::new(
        cfg.run.cache_capacity_bytes,
    ));
    Ok(Resolver::new(registry, cache))
}

/// Drive the full search through the fabric and return its outcome.
pub fn run_moldesign(
    cfg: &RunConfig,
    events: Arc<EventLog>,
    out_dir: Option<&Path>,
) -> Result<MoldesignOutcome, SteeringError> {
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
    let pool = Arc::new(CandidatePool::build(
        OBJECTIVE_SEED,
        seed,
        cfg.app.pool_size,
        cfg.app.feature_dim,
    ));
    let state = MolState {
        pool: Arc::clone(&pool),
        queue: Arc::new(PrioritizedTaskQueue::new()),
        labeled: Vec::new(),
        pending_features: HashMap::new(),
        in_flight_sims: 0,
        sims_completed: 0,
        spent_node_s: 0.0,
        budget_node_s: cfg.app.budget_node_seconds,
        est_task_s: cfg.app.simulate_duration_s * cfg.run.time_scale,
        target_in_flight: cpu_slots + policy.simulation_backlog_k,
        new_since_train: 0,
        round_active: false,
        round_counter: 0,
        collected_members: Vec::new(),
        preds: HashMap::new(),
        infer_outstanding: 0,
        found: 0,
        found_curve: Vec::new(),
        infer_resolve_rounds: Vec::new(),
        backlog_violations: 0,
        ucb_mode: cfg.app.selection == "ucb",
        stop_submitting: false,
        member_seed_base: seed.wrapping_mul(1_000),
        ensemble_size: policy.ensemble_size,
        chunk_size: policy.inference_chunk_size,
    };

    let agents = vec![
        seeder_agent(seed),
        simulation_chain_agent(seed),
        data_agent(),
        train_collect_agent(),
        infer_collect_agent(seed),
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

    let outcome = MoldesignOutcome {
        selection: cfg.app.selection.clone(),
        seed,
        threshold: pool.threshold,
        pool_above_threshold: pool.above_threshold_count(),
        simulations_completed: final_state.sims_completed,
        found_above_threshold: final_state.found,
        spent_node_seconds: final_state.spent_node_s,
        budget_node_seconds: final_state.budget_node_s,
        retrain_rounds: final_state.round_counter,
        backlog_violations: final_state.backlog_violations,
        found_curve: final_state.found_curve,
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)
            .and_then(|_| {
                std::fs::write(
                    dir.join("app-metrics.json"),
                    serde_json::to_vec_pretty(&outcome).unwrap(),
                )
            })
            .and_then(|_| {
                std::fs::write(
                    dir.join("infer-resolve-ms.json"),
                    serde_json::to_vec(&final_state.infer_resolve_rounds).unwrap(),
                )
            })
            .map_err(|e| SteeringError::Runtime(format!("writing app metrics: {e}")))?;
    }
    Ok(outcome)
}
