//! Worker-side task execution with per-phase timing: deserialize the raw
//! descriptor, restore proxied inputs, run the implementation, then proxy
//! and serialize the result.

use std::collections::HashMap;
use std::sync::Arc;

use parking_lot::Mutex;

use crate::apps::tasks::{build_task_impl, ExecContext, TaskImpl};
use crate::bench::{EventLog, Stage};
use crate::clock::{monotonic_ns, Clock};
use crate::refcore::{restore, scan_and_proxy, ProxyPolicy, Resolver, TaskPayload};
use crate::relay::{
    FunctionId, FunctionRecord, ResultEnvelope, ResultStatus, TaskDescriptor, WorkerTimings,
};

/// Shared execution environment of one endpoint's worker pool.
pub struct ExecEnv {
    pub resolver: Resolver,
    pub proxy_policy: ProxyPolicy,
    pub events: Arc<EventLog>,
    pub clock: Clock,
    functions: Mutex<HashMap<FunctionId, FunctionRecord>>,
    impls: Mutex<HashMap<FunctionId, Arc<dyn TaskImpl>>>,
}

impl ExecEnv {
    pub fn new(
        resolver: Resolver,
        proxy_policy: ProxyPolicy,
        events: Arc<EventLog>,
        clock: Clock,
    ) -> Self {
        ExecEnv {
            resolver,
            proxy_policy,
            events,
            clock,
            functions: Mutex::new(HashMap::new()),
            impls: Mutex::new(HashMap::new()),
        }
    }

    /// Remember function bodies delivered with a fetch batch.
    pub fn learn_functions(&self, records: Vec<FunctionRecord>) {
        let mut map = self.functions.lock();
        for rec in records {
            map.entry(rec.function_id.clone()).or_insert(rec);
        }
    }

    fn implementation(&self, function_id: &FunctionId) -> Result<Arc<dyn TaskImpl>, String> {
        if let Some(imp) = self.impls.lock().get(function_id) {
            return Ok(Arc::clone(imp));
        }
        let record = self
            .functions
            .lock()
            .get(function_id)
            .cloned()
            .ok_or_else(|| format!("no function body for {function_id}"))?;
        let built: Arc<dyn TaskImpl> = Arc::from(build_task_impl(&record.builtin, &record.params)?);
        self.impls
            .lock()
            .insert(function_id.clone(), Arc::clone(&built));
        Ok(built)
    }
}

fn infra_error(task_id: crate::relay::TaskId, worker_id: &str, detail: String) -> ResultEnvelope {
    ResultEnvelope {
        task_id,
        status: ResultStatus::InfraError,
        message: Some(detail),
        payload: TaskPayload::new(),
        timings: WorkerTimings::default(),
        worker_id: worker_id.to_owned(),
    }
}

/// Run one task through all four phases. Never panics outward: every
/// failure mode is an envelope (task-error for implementation failures,
/// infra-error for resolution or environment failures).
pub fn execute_task(raw_descriptor: &[u8], worker_id: &str, env: &ExecEnv) -> ResultEnvelope {
    let t0 = monotonic_ns();

    // Phase 1: deserialize.
    let descriptor = match TaskDescriptor::decode(raw_descriptor) {
        Ok(d) => d,
        Err(e) => {
            return infra_error(
                crate::relay::TaskId("unknown".into()),
                worker_id,
                format!("undecodable descriptor: {e}"),
            )
        }
    };
    let task_id = descriptor.task_id.clone();
    let topic = descriptor.topic.clone();
    env.events
        .record_at(&task_id.0, &topic, Stage::StartedOnWorker, t0);
    let t1 = monotonic_ns();

    // Phase 2: resolve proxied inputs (blocking on in-flight transfers).
    // A payload with no references has nothing to resolve: the phase is
    // skipped outright and charged exactly zero.
    let (restored, t2) = if descriptor.payload.reference_count() == 0 {
        (descriptor.payload.clone(), t1)
    } else {
        match restore(&descriptor.payload, &env.resolver) {
            Ok(p) => {
                let t2 = monotonic_ns();
                env.events
                    .record_at(&task_id.0, &topic, Stage::InputsResolved, t2);
                (p, t2)
            }
            Err(e) => {
                let mut envelope =
                    infra_error(task_id.clone(), worker_id, format!("resolve: {e}"));
                envelope.timings.deserialize_ns = t1 - t0;
                envelope.timings.time_on_worker_ns = monotonic_ns() - t0;
                env.events
                    .record_at(&task_id.0, &topic, Stage::FinishedOnWorker, monotonic_ns());
                return envelope;
            }
        }
    };

    // Phase 3: execute the registered implementation.
    let task_seed: u64 = restored
        .meta("seed")
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let ctx = ExecContext {
        clock: env.clock.clone(),
        task_seed,
    };
    let exec_outcome = env
        .implementation(&descriptor.function_id)
        .map_err(|e| (ResultStatus::InfraError, e))
        .and_then(|imp| {
            imp.run(&restored, &ctx)
                .map_err(|e| (ResultStatus::TaskError, e.0))
        });
    let t3 = monotonic_ns();
    env.events
        .record_at(&task_id.0, &topic, Stage::FinishedOnWorker, t3);

    // Phase 4: proxy + serialize the result.
    let (status, message, out_payload) = match exec_outcome {
        Ok(payload) => match scan_and_proxy(
            &payload,
            &env.proxy_policy,
            &topic,
            env.resolver.registry(),
        ) {
            Ok(proxied) => (ResultStatus::Success, None, proxied),
            Err(e) => (
                ResultStatus::InfraError,
                Some(format!("result proxying: {e}")),
                TaskPayload::new(),
            ),
        },
        Err((status, msg)) => (status, Some(msg), TaskPayload::new()),
    };
    let t4 = monotonic_ns();
    env.events
        .record_at(&task_id.0, &topic, Stage::ResultSerialized, t4);

    ResultEnvelope {
        task_id,
        status,
        message,
        payload: out_payload,
        timings: WorkerTimings {
            deserialize_ns: t1 - t0,
            resolve_ns: t2 - t1,
            execute_ns: t3 - t2,
            serialize_ns: t4 - t3,
            time_on_worker_ns: t4 - t0,
        },
        worker_id: worker_id.to_owned(),
    }
}
