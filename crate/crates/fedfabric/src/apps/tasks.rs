//! Builtin task implementations executed on endpoint workers.
//!
//! Function bodies are not shipped code: a registered function names one of
//! these builtins plus a JSON parameter block. Every builtin is a pure
//! function of (restored payload, seed) plus a simulated duration, so
//! implementations are safe to run in parallel across a worker pool.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::objective::ObjectiveParams;
use super::sampling::{sample_trajectory, Frame, TrajectoryConfig};
use super::surrogate::{predict_batch, train_member, MemberModel, TrainConfig};
use super::Candidate;
use crate::clock::Clock;
use crate::refcore::TaskPayload;

/// Simulated compute cost of one invocation, in already-scaled
/// milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DurationModel {
    Constant { ms: f64 },
    LogNormal { median_ms: f64, sigma: f64 },
}

impl Default for DurationModel {
    fn default() -> Self {
        DurationModel::Constant { ms: 0.0 }
    }
}

impl DurationModel {
    pub fn sample_ms(&self, seed: u64) -> f64 {
        match self {
            DurationModel::Constant { ms } => *ms,
            DurationModel::LogNormal { median_ms, sigma } => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let normal = Normal::new(0.0, 1.0).expect("unit normal");
                median_ms * (sigma * normal.sample(&mut rng)).exp()
            }
        }
    }
}

/// The parameter block carried by a function registration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FunctionParams {
    pub duration: DurationModel,
    /// Scaled output padding so results carry realistic byte sizes.
    pub output_padding_bytes: u64,
    pub objective_seed: u64,
    pub dim: usize,
    pub sigma: f64,
    pub train: TrainConfig,
    pub trajectory: TrajectoryConfig,
    /// Probability that a simulate invocation reports a task error.
    pub fail_probability: f64,
}

impl Default for FunctionParams {
    fn default() -> Self {
        FunctionParams {
            duration: DurationModel::default(),
            output_padding_bytes: 0,
            objective_seed: 42,
            dim: 16,
            sigma: 0.0,
            train: TrainConfig::default(),
            trajectory: TrajectoryConfig::default(),
            fail_probability: 0.0,
        }
    }
}

impl FunctionParams {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("params serialize")
    }

    pub fn from_json(bytes: &[u8]) -> Result<Self, String> {
        serde_json::from_slice(bytes).map_err(|e| format!("bad function params: {e}"))
    }
}

/// A failed task body; surfaces as a task-error result, not an infra error.
#[derive(Debug, Clone)]
pub struct TaskError(pub String);

impl std::fmt::Display for TaskError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

pub struct ExecContext {
    pub clock: Clock,
    /// Per-task seed from the payload metadata (0 when absent).
    pub task_seed: u64,
}

pub trait TaskImpl: Send + Sync {
    fn run(&self, payload: &TaskPayload, ctx: &ExecContext) -> Result<TaskPayload, TaskError>;
}

/// Store a JSON value as a payload field.
pub fn put_json<T: Serialize>(
    payload: &mut TaskPayload,
    name: &str,
    value: &T,
) -> Result<(), TaskError> {
    let bytes = serde_json::to_vec(value).map_err(|e| TaskError(format!("encoding {name}: {e}")))?;
    payload
        .push_inline(name, bytes)
        .map_err(|e| TaskError(e.to_string()))
}

/// Read a JSON value from an inline payload field.
pub fn get_json<T: DeserializeOwned>(payload: &TaskPayload, name: &str) -> Result<T, TaskError> {
    let bytes = payload
        .inline_bytes(name)
        .ok_or_else(|| TaskError(format!("missing inline field {name}")))?;
    serde_json::from_slice(bytes).map_err(|e| TaskError(format!("decoding {name}: {e}")))
}

/// Copy the input payload's metadata onto an output payload, so request
/// correlation keys (member index, provenance, seeds) ride along with
/// results.
pub fn echo_metadata(input: &TaskPayload, output: &mut TaskPayload) {
    for (k, v) in input.metadata() {
        output.set_meta(k.clone(), v.clone());
    }
}

/// Append a padding field so the encoded payload lands on `target_bytes`
/// (field framing included). No-op when the payload is already larger.
pub fn pad_payload_to(payload: &mut TaskPayload, target_bytes: u64) {
    const FIELD_OVERHEAD: u64 = 2 + 7 + 1 + 4; // name len + "padding" + tag + blob len
    let current = payload.encoded_len() as u64;
    if target_bytes <= current + FIELD_OVERHEAD {
        return;
    }
    let pad = (target_bytes - current - FIELD_OVERHEAD) as usize;
    payload
        .push_inline("padding", vec![0x5A; pad])
        .expect("padding field is unique");
}

fn simulated_sleep(params: &FunctionParams, ctx: &ExecContext) {
    let ms = params.duration.sample_ms(ctx.task_seed);
    ctx.clock.sleep_ms(ms);
}

struct NoopTask {
    params: FunctionParams,
}

impl TaskImpl for NoopTask {
    fn run(&self, _payload: &TaskPayload, ctx: &ExecContext) -> Result<TaskPayload, TaskError> {
        simulated_sleep(&self.params, ctx);
        let mut out = TaskPayload::new();
        pad_payload_to(&mut out, self.params.output_padding_bytes);
        Ok(out)
    }
}

/// Simulation outcome shipped back to the steering side.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimOutcome {
    pub candidate_id: u64,
    pub label: f64,
}

struct SimulateTask {
    params: FunctionParams,
    objective: ObjectiveParams,
}

impl TaskImpl for SimulateTask {
    fn run(&self, payload: &TaskPayload, ctx: &ExecContext) -> Result<TaskPayload, TaskError> {
        let candidate: Candidate = get_json(payload, "candidate")?;
        simulated_sleep(&self.params, ctx);
        let mut rng = ChaCha8Rng::seed_from_u64(ctx.task_seed ^ candidate.id);
        if self.params.fail_probability > 0.0
            && rng.gen_range(0.0..1.0) < self.params.fail_probability
        {
            return Err(TaskError(format!(
                "simulation of candidate {} failed",
                candidate.id
            )));
        }
        let mut label = self.objective.value(&candidate.features);
        if self.params.sigma > 0.0 {
            let normal = Normal::new(0.0, self.params.sigma).expect("sigma > 0");
            label += normal.sample(&mut rng);
        }
        let mut out = TaskPayload::new();
        echo_metadata(payload, &mut out);
        put_json(
            &mut out,
            "result",
            &SimOutcome {
                candidate_id: candidate.id,
                label,
            },
        )?;
        pad_payload_to(&mut out, self.params.output_padding_bytes);
        Ok(out)
    }
}

struct TrainTask {
    params: FunctionParams,
}

impl TaskImpl for TrainTask {
    fn run(&self, payload: &TaskPayload, ctx: &ExecContext) -> Result<TaskPayload, TaskError> {
        let examples: Vec<(Vec<f64>, f64)> = get_json(payload, "examples")?;
        let member_seed: u64 = payload
            .meta("member_seed")
            .and_then(|s| s.parse().ok())
            .unwrap_or(ctx.task_seed);
        simulated_sleep(&self.params, ctx);
        let member = train_member(&examples, member_seed, &self.params.train)
            .map_err(|e| TaskError(e.to_string()))?;
        let mut out = TaskPayload::new();
        echo_metadata(payload, &mut out);
        put_json(&mut out, "member", &member)?;
        pad_payload_to(&mut out, self.params.output_padding_bytes);
        Ok(out)
    }
}

struct InferTask {
    params: FunctionParams,
}

impl TaskImpl for InferTask {
    fn run(&self, payload: &TaskPayload, ctx: &ExecContext) -> Result<TaskPayload, TaskError> {
        let member: MemberModel = get_json(payload, "member")?;
        let candidates: Vec<Candidate> = get_json(payload, "candidates")?;
        simulated_sleep(&self.params, ctx);
        let xs: Vec<Vec<f64>> = candidates.iter().map(|c| c.features.clone()).collect();
        let preds = predict_batch(&member, &xs);
        let scored: Vec<(u64, f64)> = candidates
            .iter()
            .zip(preds)
            .map(|(c, p)| (c.id, p))
            .collect();
        let mut out = TaskPayload::new();
        echo_metadata(payload, &mut out);
        put_json(&mut out, "predictions", &scored)?;
        pad_payload_to(&mut out, self.params.output_padding_bytes);
        Ok(out)
    }
}

struct SampleTask {
    params: FunctionParams,
}

impl TaskImpl for SampleTask {
    fn run(&self, payload: &TaskPayload, ctx: &ExecContext) -> Result<TaskPayload, TaskError> {
        let members: Vec<MemberModel> = get_json(payload, "members")?;
        let start: Frame = get_json(payload, "start")?;
        let n_steps: usize = payload
            .meta("n_steps")
            .and_then(|s| s.parse().ok())
            .unwrap_or(20);
        simulated_sleep(&self.params, ctx);
        let frames = sample_trajectory(
            &members,
            &start.features,
            n_steps,
            ctx.task_seed,
            &self.params.trajectory,
        );
        let out_frames: Vec<Frame> = frames
            .into_iter()
            .enumerate()
            .map(|(i, features)| Frame {
                id: start.id.wrapping_mul(1_000_000).wrapping_add(i as u64),
                features,
            })
            .collect();
        let mut out = TaskPayload::new();
        echo_metadata(payload, &mut out);
        put_json(&mut out, "frames", &out_frames)?;
        pad_payload_to(&mut out, self.params.output_padding_bytes);
        Ok(out)
    }
}

struct FailTask;

impl TaskImpl for FailTask {
    fn run(&self, _payload: &TaskPayload, _ctx: &ExecContext) -> Result<TaskPayload, TaskError> {
        Err(TaskError("configured to fail".into()))
    }
}

/// Instantiate a builtin from a registered function body.
pub fn build_task_impl(builtin: &str, params_json: &[u8]) -> Result<Box<dyn TaskImpl>, String> {
    let params = if params_json.is_empty() {
        FunctionParams::default()
    } else {
        FunctionParams::from_json(params_json)?
    };
    Ok(match builtin {
        "noop" => Box::new(NoopTask { params }),
        "simulate" => {
            let objective = ObjectiveParams::from_seed(params.objective_seed, params.dim);
            Box::new(SimulateTask { params, objective })
        }
        "train" => Box::new(TrainTask { params }),
        "infer" => Box::new(InferTask { params }),
        "sample" => Box::new(SampleTask { params }),
        "fail" => Box::new(FailTask),
        other => return Err(format!("unknown builtin task implementation {other:?}")),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ctx() -> ExecContext {
        ExecContext {
            clock: Clock::new_virtual(),
            task_seed: 7,
        }
    }

    #[test]
    fn simulate_is_deterministic_with_zero_sigma() {
        let params = FunctionParams {
            objective_seed: 42,
            dim: 4,
            ..Default::default()
        };
        let implementation = build_task_impl("simulate", &params.to_json()).unwrap();
        let mut payload = TaskPayload::new();
        put_json(
            &mut payload,
            "candidate",
            &Candidate {
                id: 3,
                features: vec![0.1, -0.2, 0.3, 0.4],
            },
        )
        .unwrap();
        let a: SimOutcome = get_json(&implementation.run(&payload, &ctx()).unwrap(), "result").unwrap();
        let b: SimOutcome = get_json(&implementation.run(&payload, &ctx()).unwrap(), "result").unwrap();
        assert_eq!(a, b);
        let expected = ObjectiveParams::from_seed(42, 4).value(&[0.1, -0.2, 0.3, 0.4]);
        assert_eq!(a.label, expected);
    }

    #[test]
    fn padding_brings_payload_to_target_size() {
        let params = FunctionParams {
            output_padding_bytes: 50_000,
            ..Default::default()
        };
        let implementation = build_task_impl("noop", &params.to_json()).unwrap();
        let out = implementation.run(&TaskPayload::new(), &ctx()).unwrap();
        let len = out.encoded_len() as f64;
        assert!(
            (len - 50_000.0).abs() / 50_000.0 < 0.01,
            "padded payload is {len} bytes, target 50000"
        );
    }

    #[test]
    fn fail_builtin_reports_task_error() {
        let implementation = build_task_impl("fail", b"").unwrap();
        let err = implementation.run(&TaskPayload::new(), &ctx()).unwrap_err();
        assert!(err.0.contains("configured to fail"));
    }

    #[test]
    fn unknown_builtin_is_rejected() {
        assert!(build_task_impl("nonesuch", b"").is_err());
    }

    #[test]
    fn lognormal_duration_is_seeded() {
        let d = DurationModel::LogNormal {
            median_ms: 10.0,
            sigma: 0.5,
        };
        assert_eq!(d.sample_ms(4), d.sample_ms(4));
        assert_ne!(d.sample_ms(4), d.sample_ms(5));
    }
}
