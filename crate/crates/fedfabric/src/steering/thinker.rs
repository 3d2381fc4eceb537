//! The Thinker runtime: agent threads over shared state, an in-process
//! task-server channel toward the relay, and a result poller feeding
//! per-topic agent queues.

use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use crossbeam_channel::{bounded, unbounded, Receiver, Sender};
use log::{debug, warn};
use parking_lot::{Mutex, MutexGuard};

use super::{SteeringError, SteeringPolicy, Trigger};
use crate::bench::{EventLog, Stage};
use crate::clock::monotonic_ns;
use crate::config::ResourceKind;
use crate::refcore::{restore, scan_and_proxy, CacheStats, ProxyPolicy, Resolver, TaskPayload};
use crate::relay::{
    EndpointId, FunctionId, RelayClient, RelayError, ResultEnvelope, TaskDescriptor, TaskId,
};

/// Where a topic's tasks go and what function runs them.
#[derive(Debug, Clone)]
pub struct TopicRoute {
    pub endpoint_id: EndpointId,
    pub function_id: FunctionId,
    pub endpoint_kind: ResourceKind,
}

/// A completed task delivered to agents subscribed to its topic.
#[derive(Debug, Clone)]
pub struct TopicResult {
    pub topic: String,
    pub task_id: TaskId,
    pub envelope: Arc<ResultEnvelope>,
}

#[derive(Debug, Clone)]
pub enum AgentEvent {
    Start,
    Result(TopicResult),
    ResourceFree(ResourceKind),
    Timer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AgentFlow {
    Continue,
    /// The app's stop condition fired; the run drains and terminates.
    Stop,
}

type Handler<S> = Box<dyn FnMut(&AgentCx<S>, AgentEvent) -> Result<AgentFlow, SteeringError> + Send>;

/// One cooperating agent: a trigger and a handler. Handlers run serially
/// with respect to themselves; distinct agents run concurrently and share
/// state through [`AgentCx::state`].
pub struct Agent<S> {
    pub name: String,
    pub trigger: Trigger,
    handler: Handler<S>,
}

impl<S> Agent<S> {
    pub fn new<F>(name: impl Into<String>, trigger: Trigger, handler: F) -> Self
    where
        F: FnMut(&AgentCx<S>, AgentEvent) -> Result<AgentFlow, SteeringError> + Send + 'static,
    {
        Agent {
            name: name.into(),
            trigger,
            handler: Box::new(handler),
        }
    }
}

struct Submission {
    descriptor: TaskDescriptor,
    topic: String,
}

/// Context shared by all agents of one Thinker.
pub struct AgentCx<S> {
    state: Arc<Mutex<S>>,
    policy: SteeringPolicy,
    routes: BTreeMap<String, TopicRoute>,
    proxy_policy: ProxyPolicy,
    resolver: Resolver,
    events: Arc<EventLog>,
    submit_tx: Sender<Submission>,
    pending: Arc<Mutex<HashMap<TaskId, String>>>,
    stop: Arc<AtomicBool>,
}

impl<S> AgentCx<S> {
    /// The single coarse state lock. Hold it for short mutations only;
    /// submissions and resolves belong outside.
    pub fn state(&self) -> MutexGuard<'_, S> {
        self.state.lock()
    }

    pub fn policy(&self) -> &SteeringPolicy {
        &self.policy
    }

    pub fn route(&self, topic: &str) -> Result<&TopicRoute, SteeringError> {
        self.routes
            .get(topic)
            .ok_or_else(|| SteeringError::UnknownTopic(topic.to_owned()))
    }

    pub fn events(&self) -> &Arc<EventLog> {
        &self.events
    }

    /// Proxy the payload per the topic's policy, then hand the descriptor
    /// to the task-server thread. Returns as soon as the submission is
    /// queued; relay rejections surface asynchronously and abort the run.
    pub fn submit_task(&self, topic: &str, payload: TaskPayload) -> Result<TaskId, SteeringError> {
        let route = self.route(topic)?.clone();
        let task_id = TaskId::generate();
        let created_ns = monotonic_ns();
        self.events
            .record_at(&task_id.0, topic, Stage::Created, created_ns);

        let proxied = scan_and_proxy(&payload, &self.proxy_policy, topic, self.resolver.registry())
            .map_err(|e| {
                warn!("proxying inputs for topic {topic} failed: {e}");
                SteeringError::Proxy(e)
            })?;
        self.events.record(&task_id.0, topic, Stage::Serialized);

        let descriptor = TaskDescriptor {
            task_id: task_id.clone(),
            function_id: route.function_id.clone(),
            endpoint_id: route.endpoint_id.clone(),
            topic: topic.to_owned(),
            payload: proxied,
            created_ns,
            tier: None,
        };
        self.pending.lock().insert(task_id.clone(), topic.to_owned());
        self.submit_tx
            .send(Submission {
                descriptor,
                topic: topic.to_owned(),
            })
            .map_err(|_| SteeringError::Runtime("task server channel closed".into()))?;
        Ok(task_id)
    }

    /// Materialize a result's payload (resolving any references) and stamp
    /// the data_resolved event.
    pub fn resolve_result(&self, result: &TopicResult) -> Result<TaskPayload, SteeringError> {
        let restored = restore(&result.envelope.payload, &self.resolver)?;
        self.events
            .record(&result.task_id.0, &result.topic, Stage::DataResolved);
        Ok(restored)
    }

    pub fn record_stage(&self, task_id: &str, topic: &str, stage: Stage) {
        self.events.record(task_id, topic, stage);
    }

    /// Tasks submitted whose results have not yet arrived.
    pub fn pending_count(&self) -> usize {
        self.pending.lock().len()
    }

    pub fn pending_for_topic(&self, topic: &str) -> usize {
        self.pending.lock().values().filter(|t| *t == topic).count()
    }

    /// Thinker-side resolve cache counters; decisions that must not touch
    /// stores are asserted against these.
    pub fn cache_stats(&self) -> CacheStats {
        self.resolver.cache().stats()
    }

    pub fn resolver(&self) -> &Resolver {
        &self.resolver
    }

    pub fn request_stop(&self) {
        self.stop.store(true, Ordering::SeqCst);
    }
}

impl<S> Clone for AgentCx<S> {
    fn clone(&self) -> Self {
        AgentCx {
            state: Arc::clone(&self.state),
            policy: self.policy.clone(),
            routes: self.routes.clone(),
            proxy_policy: self.proxy_policy.clone(),
            resolver: self.resolver.clone(),
            events: Arc::clone(&self.events),
            submit_tx: self.submit_tx.clone(),
            pending: Arc::clone(&self.pending),
            stop: Arc::clone(&self.stop),
        }
    }
}

/// Everything a Thinker needs besides its agents and state.
pub struct ThinkerDeps {
    pub relay_addr: String,
    pub events: Arc<EventLog>,
    pub routes: BTreeMap<String, TopicRoute>,
    pub proxy_policy: ProxyPolicy,
    pub resolver: Resolver,
    pub policy: SteeringPolicy,
    pub drain_timeout: Duration,
}

const POLL_INTERVAL: Duration = Duration::from_millis(2);

/// Run agents until one returns [`AgentFlow::Stop`] (drain in-flight tasks,
/// return the final state) or errors (abort cleanly, fail fast).
pub fn run_thinker<S: Send + 'static>(
    agents: Vec<Agent<S>>,
    state: S,
    deps: ThinkerDeps,
) -> Result<S, SteeringError> {
    let state = Arc::new(Mutex::new(state));
    let stop = Arc::new(AtomicBool::new(false));
    let pending: Arc<Mutex<HashMap<TaskId, String>>> = Arc::new(Mutex::new(HashMap::new()));
    let (submit_tx, submit_rx) = bounded::<Submission>(64);
    let error_slot: Arc<Mutex<Option<SteeringError>>> = Arc::new(Mutex::new(None));

    let cx = AgentCx {
        state: Arc::clone(&state),
        policy: deps.policy.clone(),
        routes: deps.routes.clone(),
        proxy_policy: deps.proxy_policy.clone(),
        resolver: deps.resolver.clone(),
        events: Arc::clone(&deps.events),
        submit_tx,
        pending: Arc::clone(&pending),
        stop: Arc::clone(&stop),
    };

    // Task-server thread: drains the submission channel into the relay.
    let task_server = {
        let client = RelayClient::new(deps.relay_addr.clone());
        let events = Arc::clone(&deps.events);
        let stop = Arc::clone(&stop);
        let error_slot = Arc::clone(&error_slot);
        let pending = Arc::clone(&pending);
        std::thread::Builder::new()
            .name("task-server".into())
            .spawn(move || {
                for sub in submit_rx.iter() {
                    events.record(&sub.descriptor.task_id.0, &sub.topic, Stage::SentToServer);
                    events.record(&sub.descriptor.task_id.0, &sub.topic, Stage::SentToRelay);
                    loop {
                        match client.submit(&sub.descriptor) {
                            Ok(_tier) => break,
                            Err(e) if e.is_retriable() => {
                                debug!("submit retry for topic {}: {e}", sub.topic);
                                std::thread::sleep(Duration::from_millis(200));
                                if stop.load(Ordering::SeqCst) {
                                    break;
                                }
                            }
                            Err(e) => {
                                // Relay rejection, propagated with topic
                                // context; the run fails fast.
                                let mut slot = error_slot.lock();
                                if slot.is_none() {
                                    *slot = Some(SteeringError::Agent {
                                        agent: format!("task-server[{}]", sub.topic),
                                        detail: e.to_string(),
                                    });
                                }
                                pending.lock().remove(&sub.descriptor.task_id);
                                stop.store(true, Ordering::SeqCst);
                                break;
                            }
                        }
                    }
                }
            })
            .expect("spawn task server")
    };

    // Agent threads, each with its own event queue.
    let mut agent_txs: Vec<(Trigger, String, Sender<AgentEvent>)> = Vec::new();
    let mut agent_threads = Vec::new();
    for agent in agents {
        let (tx, rx): (Sender<AgentEvent>, Receiver<AgentEvent>) = unbounded();
        agent_txs.push((agent.trigger.clone(), agent.name.clone(), tx.clone()));
        let cx = cx.clone();
        let stop = Arc::clone(&stop);
        let error_slot = Arc::clone(&error_slot);
        let mut handler = agent.handler;
        let name = agent.name.clone();
        agent_threads.push(
            std::thread::Builder::new()
                .name(format!("agent-{name}"))
                .spawn(move || loop {
                    match rx.recv_timeout(Duration::from_millis(50)) {
                        Ok(event) => match (handler)(&cx, event) {
                            Ok(AgentFlow::Continue) => {}
                            Ok(AgentFlow::Stop) => {
                                debug!("agent {name} requested stop");
                                stop.store(true, Ordering::SeqCst);
                            }
                            Err(e) => {
                                warn!("agent {name} failed: {e}");
                                let mut slot = error_slot.lock();
                                if slot.is_none() {
                                    *slot = Some(SteeringError::Agent {
                                        agent: name.clone(),
                                        detail: e.to_string(),
                                    });
                                }
                                stop.store(true, Ordering::SeqCst);
                            }
                        },
                        Err(crossbeam_channel::RecvTimeoutError::Timeout) => {
                            if stop.load(Ordering::SeqCst) && rx.is_empty() {
                                return;
                            }
                        }
                        Err(crossbeam_channel::RecvTimeoutError::Disconnected) => return,
                    }
                })
                .expect("spawn agent thread"),
        );
    }

    // Timers.
    let mut timer_threads = Vec::new();
    for (trigger, _name, tx) in &agent_txs {
        if let Trigger::OnTimer(period) = trigger {
            let period = *period;
            let tx = tx.clone();
            let stop = Arc::clone(&stop);
            timer_threads.push(std::thread::spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    std::thread::sleep(period);
                    if tx.send(AgentEvent::Timer).is_err() {
                        return;
                    }
                }
            }));
        }
    }

    // Start events fire before any result can arrive.
    for (trigger, _, tx) in &agent_txs {
        if *trigger == Trigger::OnStart {
            let _ = tx.send(AgentEvent::Start);
        }
    }

    // Result poller: cycle over pending tasks with immediate-return polls,
    // stamping result_received and fanning results out by topic.
    let poller = {
        let client = RelayClient::new(deps.relay_addr.clone());
        let events = Arc::clone(&deps.events);
        let pending = Arc::clone(&pending);
        let stop = Arc::clone(&stop);
        let routes = deps.routes.clone();
        let txs = agent_txs.clone();
        std::thread::Builder::new()
            .name("result-poller".into())
            .spawn(move || loop {
                let snapshot: Vec<(TaskId, String)> = pending
                    .lock()
                    .iter()
                    .map(|(k, v)| (k.clone(), v.clone()))
                    .collect();
                if snapshot.is_empty() && stop.load(Ordering::SeqCst) {
                    return;
                }
                for (task_id, topic) in snapshot {
                    match client.get_result(&task_id, 0) {
                        Ok(Some(envelope)) => {
                            events.record(&task_id.0, &topic, Stage::ResultReceived);
                            pending.lock().remove(&task_id);
                            let result = TopicResult {
                                topic: topic.clone(),
                                task_id,
                                envelope: Arc::new(envelope),
                            };
                            for (trigger, _, tx) in &txs {
                                match trigger {
                                    Trigger::OnResult(t) if *t == topic => {
                                        let _ = tx.send(AgentEvent::Result(result.clone()));
                                    }
                                    Trigger::OnResourceFree(kind) => {
                                        if let Some(route) = routes.get(&topic) {
                                            if route.endpoint_kind == *kind {
                                                let _ =
                                                    tx.send(AgentEvent::ResourceFree(*kind));
                                            }
                                        }
                                    }
                                    _ => {}
                                }
                            }
                        }
                        Ok(None) => {}
                        // Not yet submitted (still in the channel) or relay
                        // briefly away: try again next cycle.
                        Err(RelayError::UnknownTask(_)) => {}
                        Err(e) if e.is_retriable() => {
                            debug!("poll retry: {e}");
                            std::thread::sleep(Duration::from_millis(100));
                        }
                        Err(e) => {
                            warn!("result poll failed for {task_id}: {e}");
                            pending.lock().remove(&task_id);
                        }
                    }
                }
                std::thread::sleep(POLL_INTERVAL);
            })
            .expect("spawn result poller")
    };

    // Wait for a stop request, then drain in-flight tasks.
    while !stop.load(Ordering::SeqCst) {
        std::thread::sleep(Duration::from_millis(10));
    }
    let aborted = error_slot.lock().is_some();
    if !aborted {
        let deadline = Instant::now() + deps.drain_timeout;
        while !pending.lock().is_empty() && Instant::now() < deadline {
            std::thread::sleep(Duration::from_millis(10));
        }
    }
    // Anything still pending (abort, or drain timeout) is abandoned so the
    // poller can exit.
    pending.lock().clear();

    // Tear down: close the submission channel, let threads finish.
    drop(cx);
    for t in timer_threads {
        let _ = t.join();
    }
    for (_, _, tx) in agent_txs.drain(..) {
        drop(tx);
    }
    for t in agent_threads {
        let _ = t.join();
    }
    let _ = poller.join();
    let _ = task_server.join();

    if let Some(e) = error_slot.lock().take() {
        return Err(e);
    }
    match Arc::try_unwrap(state) {
        Ok(m) => Ok(m.into_inner()),
        Err(_) => Err(SteeringError::Runtime(
            "state still referenced after shutdown".into(),
        )),
    }
}
