//! No-op benchmark driver: runs the configured noop topics cell by cell,
//! one task in flight at a time, so per-cell latency medians are clean.
//!
//! Cell topics encode their input size as `...-<bytes>b-...` (for example
//! `noop-1000000b-on`); the driver parses the size from the topic name.

use std::path::Path;
use std::sync::Arc;

use serde::Serialize;

use super::moldesign::{register_topics, thinker_resolver};
use crate::bench::EventLog;
use crate::config::RunConfig;
use crate::refcore::TaskPayload;
use crate::relay::RelayClient;
use crate::steering::{
    run_thinker, Agent, AgentCx, AgentEvent, AgentFlow, SteeringError, SteeringPolicy,
    ThinkerDeps, Trigger,
};

#[derive(Debug, Clone, Serialize)]
pub struct NoopBenchOutcome {
    pub cells: Vec<CellOutcome>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellOutcome {
    pub topic: String,
    pub input_bytes: u64,
    pub tasks: usize,
}

/// Parse `...-<bytes>b-...` out of a topic name.
pub fn input_bytes_of(topic: &str) -> Option<u64> {
    topic
        .split('-')
        .find_map(|part| part.strip_suffix('b').and_then(|n| n.parse().ok()))
}

struct CellState {
    topic: String,
    input_bytes: u64,
    submitted: usize,
    completed: usize,
}

struct BenchState {
    cells: Vec<CellState>,
    current: usize,
    tasks_per_cell: usize,
}

fn submit_one(cx: &AgentCx<BenchState>, cell_idx: usize) -> Result<(), SteeringError> {
    let (topic, bytes, seq) = {
        let mut st = cx.state();
        let cell = &mut st.cells[cell_idx];
        cell.submitted += 1;
        (cell.topic.clone(), cell.input_bytes, cell.submitted)
    };
    let mut payload = TaskPayload::new();
    payload
        .push_inline("input", vec![0xA5; bytes as usize])
        .map_err(|e| SteeringError::Runtime(e.to_string()))?;
    payload.set_meta("seed", seq.to_string());
    cx.submit_task(&topic, payload)?;
    Ok(())
}

fn cell_agent(topic: String, cell_idx: usize) -> Agent<BenchState> {
    Agent::new(
        format!("cell-{topic}"),
        Trigger::OnResult(topic),
        move |cx: &AgentCx<BenchState>, event| {
            let AgentEvent::Result(result) = event else {
                return Ok(AgentFlow::Continue);
            };
            if result.envelope.status != crate::relay::ResultStatus::Success {
                return Err(SteeringError::Runtime(format!(
                    "noop task {} failed: {:?}",
                    result.task_id, result.envelope.message
                )));
            }
            let action = {
                let mut st = cx.state();
                let tasks_per_cell = st.tasks_per_cell;
                let cell = &mut st.cells[cell_idx];
                cell.completed += 1;
                if cell.submitted < tasks_per_cell {
                    Some(cell_idx)
                } else if cell.completed == tasks_per_cell {
                    st.current += 1;
                    if st.current < st.cells.len() {
                        Some(st.current)
                    } else {
                        None
                    }
                } else {
                    None
                }
            };
            match action {
                Some(next_cell) => {
                    submit_one(cx, next_cell)?;
                    Ok(AgentFlow::Continue)
                }
                None => {
                    let st = cx.state();
                    if st.current >= st.cells.len() {
                        Ok(AgentFlow::Stop)
                    } else {
                        Ok(AgentFlow::Continue)
                    }
                }
            }
        },
    )
}

/// Run every configured noop topic for `tasks_per_cell` tasks each.
pub fn run_noop_bench(
    cfg: &RunConfig,
    events: Arc<EventLog>,
    out_dir: Option<&Path>,
) -> Result<NoopBenchOutcome, SteeringError> {
    let policy = SteeringPolicy::from_config(&cfg.policy).map_err(SteeringError::Runtime)?;
    let client = RelayClient::new(cfg.relay.listen.clone());
    let routes = register_topics(cfg, &client)?;
    let resolver = thinker_resolver(cfg)?;

    let cells: Vec<CellState> = cfg
        .topics
        .iter()
        .filter(|t| t.function == "noop")
        .map(|t| CellState {
            topic: t.name.clone(),
            input_bytes: input_bytes_of(&t.name).unwrap_or(0),
            submitted: 0,
            completed: 0,
        })
        .collect();
    if cells.is_empty() {
        return Err(SteeringError::Runtime(
            "no noop topics in configuration".into(),
        ));
    }

    let mut agents: Vec<Agent<BenchState>> = cells
        .iter()
        .enumerate()
        .map(|(idx, c)| cell_agent(c.topic.clone(), idx))
        .collect();
    agents.push(Agent::new("kickoff", Trigger::OnStart, |cx: &AgentCx<BenchState>, event| {
        let AgentEvent::Start = event else {
            return Ok(AgentFlow::Continue);
        };
        submit_one(cx, 0)?;
        Ok(AgentFlow::Continue)
    }));

    let state = BenchState {
        cells,
        current: 0,
        tasks_per_cell: cfg.app.tasks_per_cell,
    };
    let deps = ThinkerDeps {
        relay_addr: cfg.relay.listen.clone(),
        events,
        routes,
        proxy_policy: cfg
            .proxy_policy()
            .map_err(|e| SteeringError::Runtime(e.to_string()))?,
        resolver,
        policy,
        drain_timeout: std::time::Duration::from_secs(30),
    };
    let final_state = run_thinker(agents, state, deps)?;

    let outcome = NoopBenchOutcome {
        cells: final_state
            .cells
            .iter()
            .map(|c| CellOutcome {
                topic: c.topic.clone(),
                input_bytes: c.input_bytes,
                tasks: c.completed,
            })
            .collect(),
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
