//! Drives executions from trigger to a terminal state.
//!
//! The orchestrator is a synchronous state owner: every mutation happens in
//! a `&mut self` method that takes the current instant, so a simulated clock
//! reproduces runs exactly. Callers that share it across threads wrap it in
//! a mutex, which makes that mutex the per-execution serialization point.

mod slots;
mod timeouts;

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use chrono::Duration;
use serde_json::Value;
use thiserror::Error;

pub use slots::SlotPool;
pub use timeouts::{DeadlineKind, TimeoutSupervisor};

use crate::agent::{Ack, AgentConfig, AgentRequest, AGENT_BINARY_PATH, RUNNER_PATH};
use crate::clock::{ceil_to_second, Instant};
use crate::model::{
    clone_with_overrides, validate_definition, BenchmarkDefinition, BenchmarkId, DefinitionErrors, Execution,
    ExecutionId, Overrides, TriggerCause, ValidationContext,
};
use crate::providers::{
    DriverMessage, ExecMode, HandleStatus, Payload, ProviderRegistry, Readiness, ResourceHandle, ResourceKind,
};
use crate::model::RecipeRef;
use crate::provisioning::{self, ApplyContext, ProvisioningError, Recipe};
use crate::results::{self, Observation, ResultsError, VariabilityRow};
use crate::scheduler::ScheduleEntry;
use crate::statemachine::{ExecutionEvent as E, ExecutionState as S, TransitionError};
use crate::store::{ExecutionFilter, Store};

/// Placeholder agent for drivers that simulate the agent themselves.
pub const STUB_AGENT: &[u8] = b"#!/bin/sh\necho 'cwb agent stub: no agent binary configured' >&2\nexit 1\n";

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    pub max_preparing: usize,
    pub max_postprocessing: usize,
    /// Base URL agents report to.
    pub server_url: String,
    /// Synced to every VM as `/cwb/agent`.
    pub agent_payload: Arc<Vec<u8>>,
    /// Timeout defaults. The provider set is taken from the registry.
    pub validation: ValidationContext,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        Self {
            max_preparing: 4,
            max_postprocessing: 4,
            server_url: "http://127.0.0.1:8080".into(),
            agent_payload: Arc::new(STUB_AGENT.to_vec()),
            validation: ValidationContext::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("benchmark `{0}` not found")]
    BenchmarkNotFound(String),
    #[error("benchmark `{0}` is inactive")]
    BenchmarkInactive(String),
    #[error("execution `{0}` not found")]
    ExecutionNotFound(String),
    #[error("invalid agent token")]
    Unauthorized,
    #[error("conflict: {0}")]
    Conflict(String),
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("execution `{0}` already terminated")]
    AlreadyTerminal(String),
    #[error("execution is not in development mode")]
    NotInDevMode,
    #[error("resources already released")]
    ResourcesAlreadyReleased,
    #[error("no preparing slot available")]
    NoPreparingSlot,
    #[error("invalid benchmark definition: {0}")]
    Definition(DefinitionErrors),
    #[error(transparent)]
    Results(#[from] ResultsError),
    #[error(transparent)]
    Provisioning(#[from] ProvisioningError),
    #[error(transparent)]
    Transition(#[from] TransitionError),
}

/// What `recover` did to executions found unfinished in a loaded store.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RecoveryReport {
    pub failed: Vec<ExecutionId>,
    pub rearmed: Vec<ExecutionId>,
    pub adopted_handles: usize,
}

pub struct Orchestrator {
    config: OrchestratorConfig,
    store: Store,
    providers: ProviderRegistry,
    slots: SlotPool,
    timeouts: TimeoutSupervisor,
    /// Next readiness poll per execution in PREPARING.
    ready_polls: BTreeMap<ExecutionId, Instant>,
}

impl std::fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Orchestrator")
            .field("providers", &self.providers)
            .field("slots", &self.slots)
            .field("executions", &self.store.executions.len())
            .finish()
    }
}

impl Orchestrator {
    pub fn new(config: OrchestratorConfig, store: Store, providers: ProviderRegistry) -> Self {
        let slots = SlotPool::new(config.max_preparing, config.max_postprocessing);
        Self {
            config,
            store,
            providers,
            slots,
            timeouts: TimeoutSupervisor::default(),
            ready_polls: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn providers(&self) -> &ProviderRegistry {
        &self.providers
    }

    pub fn providers_mut(&mut self) -> &mut ProviderRegistry {
        &mut self.providers
    }

    pub fn slots(&self) -> &SlotPool {
        &self.slots
    }

    pub fn timeouts(&self) -> &TimeoutSupervisor {
        &self.timeouts
    }

    pub fn validation_context(&self) -> ValidationContext {
        let mut ctx = self.config.validation.clone();
        ctx.providers = self.providers.ids().map(str::to_owned).collect();
        ctx
    }

    // -----------------------------------------------------------------------
    // Benchmarks and recipes

    pub fn create_benchmark(&mut self, doc: &Value, now: Instant) -> Result<BenchmarkDefinition, OrchestratorError> {
        let mut def = validate_definition(doc, &self.validation_context()).map_err(OrchestratorError::Definition)?;
        def.id = self.store.ids.next("bench", now).into();
        self.store.benchmarks.insert(def.id.clone(), def.clone());
        Ok(def)
    }

    pub fn clone_benchmark(
        &mut self,
        id: &BenchmarkId,
        overrides: &Overrides,
        now: Instant,
    ) -> Result<BenchmarkDefinition, OrchestratorError> {
        let base = self.benchmark(id)?.clone();
        let fresh: BenchmarkId = self.store.ids.next("bench", now).into();
        let def = clone_with_overrides(&base, overrides, &self.validation_context(), fresh)
            .map_err(OrchestratorError::Definition)?;
        self.store.benchmarks.insert(def.id.clone(), def.clone());
        Ok(def)
    }

    pub fn set_benchmark_active(&mut self, id: &BenchmarkId, active: bool) -> Result<(), OrchestratorError> {
        let b = self
            .store
            .benchmarks
            .get_mut(id)
            .ok_or_else(|| OrchestratorError::BenchmarkNotFound(id.0.clone()))?;
        b.active = active;
        if !active {
            self.store.scheduler.forget(id);
        }
        Ok(())
    }

    pub fn benchmark(&self, id: &BenchmarkId) -> Result<&BenchmarkDefinition, OrchestratorError> {
        self.store
            .benchmarks
            .get(id)
            .ok_or_else(|| OrchestratorError::BenchmarkNotFound(id.0.clone()))
    }

    pub fn benchmarks(&self) -> impl Iterator<Item = &BenchmarkDefinition> {
        self.store.benchmarks.values()
    }

    /// Registers or replaces a recipe version.
    pub fn add_recipe(&mut self, recipe: Recipe) -> Result<RecipeRef, OrchestratorError> {
        Ok(self.store.recipes.upsert(recipe)?)
    }

    // -----------------------------------------------------------------------
    // Executions

    pub fn execution(&self, id: &ExecutionId) -> Result<&Execution, OrchestratorError> {
        self.store
            .executions
            .get(id)
            .ok_or_else(|| OrchestratorError::ExecutionNotFound(id.0.clone()))
    }

    fn execution_mut(&mut self, id: &ExecutionId) -> Result<&mut Execution, OrchestratorError> {
        self.store
            .executions
            .get_mut(id)
            .ok_or_else(|| OrchestratorError::ExecutionNotFound(id.0.clone()))
    }

    pub fn executions<'a>(&'a self, filter: &'a ExecutionFilter) -> impl Iterator<Item = &'a Execution> + 'a {
        self.store.executions_matching(filter)
    }

    /// Log lines after `cursor`, and the cursor to pass next time.
    pub fn log_after(&self, id: &ExecutionId, cursor: usize) -> Result<(Vec<String>, usize), OrchestratorError> {
        let e = self.execution(id)?;
        let from = cursor.min(e.log.len());
        Ok((e.log[from..].to_vec(), e.log.len()))
    }

    pub fn agent_token(&self, id: &ExecutionId) -> String {
        self.store.token_for(id)
    }

    pub fn trigger(
        &mut self,
        benchmark: &BenchmarkId,
        cause: TriggerCause,
        now: Instant,
    ) -> Result<ExecutionId, OrchestratorError> {
        let bench = self.benchmark(benchmark)?;
        if !bench.active {
            return Err(OrchestratorError::BenchmarkInactive(benchmark.0.clone()));
        }
        let bench = bench.clone();
        let id: ExecutionId = self.store.ids.next("exec", now).into();
        let exec = Execution::create(id.clone(), &bench, cause, now);
        self.timeouts.arm(&id, DeadlineKind::Run, exec.deadline_at);
        self.store.executions.insert(id.clone(), exec);
        self.slots.enqueue_preparing(id.clone());
        Ok(id)
    }

    // -----------------------------------------------------------------------
    // Clock driven work

    /// Runs everything due at `now`: scheduled triggers, driver output,
    /// deadlines, readiness polls and queued starts.
    pub fn tick(&mut self, now: Instant) {
        let due = {
            let entries = self.store.benchmarks.values().map(|b| ScheduleEntry {
                id: &b.id,
                schedule: b.schedule.as_ref(),
                active: b.active,
            });
            self.store.scheduler.tick(now, entries.collect::<Vec<_>>())
        };
        for bench in due {
            if let Err(e) = self.trigger(&bench, TriggerCause::Scheduled, now) {
                tracing::warn!(benchmark = %bench.0, "scheduled trigger failed: {e}");
            }
        }

        for msg in self.providers.drain_all(now) {
            self.handle_driver_message(msg, now);
        }

        self.enforce_timeouts(now);
        self.poll_preparing(now);
        self.start_queued(now);
    }

    fn handle_driver_message(&mut self, msg: DriverMessage, now: Instant) {
        match msg {
            DriverMessage::Log { owner, text } => {
                if let Ok(e) = self.execution_mut(&owner) {
                    e.append_log(now, &text);
                }
            }
            DriverMessage::Agent {
                execution_id,
                token,
                request,
            } => {
                if let Err(err) = self.agent_request(&execution_id, &token, request, now) {
                    if let Ok(e) = self.execution_mut(&execution_id) {
                        e.append_log(now, &format!("agent request rejected: {err}"));
                    }
                }
            }
        }
    }

    /// Fires due deadlines in (deadline, execution id) order and returns the
    /// events that were applied.
    pub fn enforce_timeouts(&mut self, now: Instant) -> Vec<(ExecutionId, E)> {
        let mut fired = Vec::new();
        for (at, id, kind) in self.timeouts.take_due(now) {
            let Ok(exec) = self.execution(&id) else { continue };
            let (state, dev_mode) = (exec.state, exec.dev_mode);
            let event = match kind {
                DeadlineKind::Run => match state {
                    S::WaitingForStartPreparing | S::Preparing => Some(E::FailedOnPreparing),
                    S::WaitingForStartRunning => Some(E::FailedOnRunning),
                    S::Running | S::Postprocessing => Some(E::RunTimeoutElapsed),
                    S::WaitingForStartPostprocessing => Some(E::FailedOnPostprocessing),
                    _ => None,
                },
                DeadlineKind::ReleaseGrace if state.is_held_failure() => {
                    if dev_mode {
                        self.timeouts.suspend_grace_at(&id, at);
                        None
                    } else {
                        Some(E::ReleaseGraceElapsed)
                    }
                }
                DeadlineKind::ReleaseGrace => None,
            };
            if let Some(event) = event {
                if let Ok(e) = self.execution_mut(&id) {
                    let reason = match kind {
                        DeadlineKind::Run => "execution timeout elapsed",
                        DeadlineKind::ReleaseGrace => "release grace period elapsed",
                    };
                    e.append_log(now, reason);
                }
                if self.emit(&id, event, now).is_ok() {
                    fired.push((id, event));
                }
            }
        }
        fired
    }

    fn start_queued(&mut self, now: Instant) {
        while let Some(id) = self.slots.next_preparing() {
            if self.execution(&id).is_ok_and(|e| e.state == S::WaitingForStartPreparing) {
                self.start_preparing(&id, now);
            }
        }
        while let Some(id) = self.slots.next_postprocessing() {
            if self
                .execution(&id)
                .is_ok_and(|e| e.state == S::WaitingForStartPostprocessing)
            {
                self.start_postprocessing(&id, now);
            }
        }
    }

    /// Earliest instant at which `tick` has work, rounded up to a whole
    /// second. `None` when everything waits on external input.
    pub fn next_wakeup(&self, now: Instant) -> Option<Instant> {
        let entries: Vec<_> = self
            .store
            .benchmarks
            .values()
            .map(|b| ScheduleEntry {
                id: &b.id,
                schedule: b.schedule.as_ref(),
                active: b.active,
            })
            .collect();
        let ready_now = self.slots.has_waiting().then_some(now);
        [
            self.timeouts.next_deadline(),
            self.providers.next_wakeup(),
            self.ready_polls.values().min().copied(),
            self.store.scheduler.next_due(entries),
            ready_now,
        ]
        .into_iter()
        .flatten()
        .min()
        .map(|t| ceil_to_second(t.max(now)))
    }

    /// Ticks from `start` through successive wakeups until nothing is left
    /// to do or `horizon` is passed. Returns the last tick instant.
    pub fn run_until_idle(&mut self, start: Instant, horizon: Instant) -> Instant {
        let mut now = start;
        loop {
            self.tick(now);
            match self.next_wakeup(now) {
                Some(t) if t <= horizon => now = t.max(now + Duration::seconds(1)),
                _ => return now,
            }
        }
    }

    // -----------------------------------------------------------------------
    // Pipeline

    /// Applies `event` and performs the side effects of the transition.
    fn emit(&mut self, id: &ExecutionId, event: E, now: Instant) -> Result<S, TransitionError> {
        let exec = self.store.executions.get_mut(id).expect("emit on known execution");
        let prev = exec.state;
        let next = exec.apply(event, now)?;
        self.on_transition(id, prev, next, event, now);
        Ok(next)
    }

    fn on_transition(&mut self, id: &ExecutionId, prev: S, next: S, event: E, now: Instant) {
        if prev == next {
            match event {
                E::DevModeEntered if next.is_held_failure() => self.timeouts.suspend_grace(id),
                E::DevModeExited if next.is_held_failure() => {
                    let exec = &self.store.executions[id];
                    let grace = self.grace_of(id);
                    let at = exec.failure_entered_at().unwrap_or(now) + grace;
                    self.timeouts.disarm(id, DeadlineKind::ReleaseGrace);
                    self.timeouts.arm(id, DeadlineKind::ReleaseGrace, at.max(now));
                }
                _ => {}
            }
            return;
        }

        if matches!(prev, S::WaitingForStartPreparing | S::WaitingForStartPostprocessing) {
            self.slots.dequeue(id);
        }
        if matches!(prev, S::Preparing | S::Postprocessing) {
            self.slots.release(id);
            self.ready_polls.remove(id);
        }
        if prev.is_held_failure() {
            self.timeouts.disarm(id, DeadlineKind::ReleaseGrace);
        }

        if next == S::Preparing {
            self.slots.occupy_preparing(id);
        }
        if next == S::Postprocessing && self.is_multi_vm(id) {
            self.slots.occupy_postprocessing(id);
        }
        if next.is_held_failure() {
            let at = now + self.grace_of(id);
            if self.store.executions[id].dev_mode {
                self.timeouts.suspend_grace_at(id, at);
            } else {
                self.timeouts.arm(id, DeadlineKind::ReleaseGrace, at);
            }
        }
        if next == S::WaitingForStartPostprocessing {
            if self.is_multi_vm(id) {
                self.slots.enqueue_postprocessing(id.clone());
            } else {
                self.start_postprocessing(id, now);
            }
        }
        if next == S::ReleasingResources {
            self.timeouts.disarm_all(id);
            self.release_resources(id, now);
        }
        if next.is_terminal() {
            self.timeouts.disarm_all(id);
            self.slots.release(id);
            self.slots.dequeue(id);
            self.ready_polls.remove(id);
        }
    }

    fn grace_of(&self, id: &ExecutionId) -> Duration {
        let exec = &self.store.executions[id];
        self.store
            .benchmarks
            .get(&exec.benchmark_id)
            .map_or(Duration::minutes(i64::from(self.config.validation.default_release_grace_minutes)), |b| {
                b.release_grace()
            })
    }

    fn is_multi_vm(&self, id: &ExecutionId) -> bool {
        let exec = &self.store.executions[id];
        self.store
            .benchmarks
            .get(&exec.benchmark_id)
            .is_some_and(|b| b.vms.len() > 1)
    }

    fn benchmark_of(&self, id: &ExecutionId) -> Option<BenchmarkDefinition> {
        let exec = self.store.executions.get(id)?;
        self.store.benchmarks.get(&exec.benchmark_id).cloned()
    }

    fn log(&mut self, id: &ExecutionId, now: Instant, text: &str) {
        if let Some(e) = self.store.executions.get_mut(id) {
            e.append_log(now, text);
        }
    }

    fn fail(&mut self, id: &ExecutionId, event: E, now: Instant, reason: &str) {
        self.log(id, now, reason);
        if let Err(e) = self.emit(id, event, now) {
            self.log(id, now, &format!("could not record failure: {e}"));
        }
    }

    fn start_preparing(&mut self, id: &ExecutionId, now: Instant) {
        if self.emit(id, E::StartedPreparing, now).is_err() {
            return;
        }
        let Some(bench) = self.benchmark_of(id) else {
            return self.fail(id, E::FailedOnPreparing, now, "benchmark definition missing");
        };
        for spec in &bench.vms {
            let acquired = self
                .providers
                .get_mut(&spec.provider)
                .and_then(|d| d.acquire(id, spec, now));
            match acquired {
                Ok(handles) => {
                    let names: Vec<_> = handles.iter().map(|h| h.id.to_string()).collect();
                    self.log(
                        id,
                        now,
                        &format!("requested {} for role {}: {}", spec.provider, spec.role, names.join(", ")),
                    );
                    self.execution_mut(id).expect("known").resources.extend(handles);
                }
                Err(e) => {
                    return self.fail(
                        id,
                        E::FailedOnPreparing,
                        now,
                        &format!("acquire for role {} failed: {e}", spec.role),
                    );
                }
            }
        }
        self.ready_polls.insert(id.clone(), now);
    }

    fn poll_preparing(&mut self, now: Instant) {
        let due: Vec<ExecutionId> = self
            .ready_polls
            .iter()
            .filter(|(_, at)| **at <= now)
            .map(|(id, _)| id.clone())
            .collect();
        for id in due {
            self.ready_polls.remove(&id);
            if !self.execution(&id).is_ok_and(|e| e.state == S::Preparing) {
                continue;
            }
            match self.check_ready(&id, now) {
                Ok(None) => self.finish_preparing(&id, now),
                Ok(Some(at)) => {
                    self.ready_polls.insert(id, at);
                }
                Err(reason) => self.fail(&id, E::FailedOnPreparing, now, &reason),
            }
        }
    }

    /// `None` when every handle is ready, else the next instant to look.
    fn check_ready(&mut self, id: &ExecutionId, now: Instant) -> Result<Option<Instant>, String> {
        let pending: Vec<(usize, ResourceHandle)> = self.store.executions[id]
            .resources
            .iter()
            .enumerate()
            .filter(|(_, h)| h.status == HandleStatus::Requested)
            .map(|(i, h)| (i, h.clone()))
            .collect();
        let mut later: Option<Instant> = None;
        for (i, h) in pending {
            let r = self
                .providers
                .get_mut(&h.provider)
                .and_then(|d| d.await_ready(&h.id, now))
                .map_err(|e| e.to_string())?;
            match r {
                Readiness::Ready(ready) => {
                    self.log(id, now, &format!("{} ready at {}", ready.id, ready.endpoint));
                    self.execution_mut(id).expect("known").resources[i] = ready;
                }
                Readiness::NotBefore(at) => later = Some(later.map_or(at, |l| l.min(at))),
            }
        }
        Ok(later)
    }

    fn finish_preparing(&mut self, id: &ExecutionId, now: Instant) {
        match self.provision(id, now) {
            Ok(()) => {
                if self.emit(id, E::FinishedPreparing, now).is_ok() {
                    self.start_running(id, now);
                }
            }
            Err(reason) => self.fail(id, E::FailedOnPreparing, now, &reason),
        }
    }

    fn vm_handles(&self, id: &ExecutionId) -> Vec<ResourceHandle> {
        self.store.executions[id]
            .resources
            .iter()
            .filter(|h| h.kind == ResourceKind::Vm && h.status != HandleStatus::Released)
            .cloned()
            .collect()
    }

    /// Syncs the agent and applies the role's recipes on every VM.
    fn provision(&mut self, id: &ExecutionId, now: Instant) -> Result<(), String> {
        let bench = self.benchmark_of(id).ok_or("benchmark definition missing")?;
        let token = self.store.token_for(id);
        for vm in self.vm_handles(id) {
            let recipes = provisioning::resolve(&self.store.recipes, &bench, &vm.role).map_err(|e| e.to_string())?;
            let driver = self.providers.get_mut(&vm.provider).map_err(|e| e.to_string())?;
            let agent = Payload::new(AGENT_BINARY_PATH, self.config.agent_payload.as_slice()).executable();
            driver
                .sync(&vm.id, &[agent], now)
                .map_err(|e| format!("agent upload to {} failed: {e}", vm.id))?;
            let ctx = ApplyContext {
                agent: AgentConfig {
                    server: self.config.server_url.clone(),
                    execution_id: id.clone(),
                    token: token.clone(),
                    role: vm.role.clone(),
                },
            };
            let report = provisioning::apply(driver, &vm.id, &recipes, &ctx, now);
            self.log(id, now, &format!("provisioning {} (role {}):\n{report}", vm.id, vm.role));
            if let Some(e) = report.failure() {
                return Err(format!("provisioning {} failed: {e}", vm.id));
            }
        }
        Ok(())
    }

    /// VM handles carrying the runner, in acquisition order.
    fn runner_vms(&mut self, id: &ExecutionId) -> Vec<ResourceHandle> {
        let mut out = Vec::new();
        for vm in self.vm_handles(id) {
            let has = self
                .providers
                .get_mut(&vm.provider)
                .and_then(|d| d.read_file(&vm.id, RUNNER_PATH))
                .is_ok_and(|f| f.is_some());
            if has {
                out.push(vm);
            }
        }
        out
    }

    fn start_running(&mut self, id: &ExecutionId, now: Instant) {
        if self.emit(id, E::StartedRunning, now).is_err() {
            return;
        }
        let vms = self.runner_vms(id);
        if vms.is_empty() {
            return self.fail(id, E::FailedOnRunning, now, "no VM carries a runner");
        }
        for vm in vms {
            let r = self
                .providers
                .get_mut(&vm.provider)
                .and_then(|d| d.exec(&vm.id, "./cwb/runner run", ExecMode::FireAndForget, now));
            match r {
                Ok(_) => self.log(id, now, &format!("run callback invoked on {}", vm.id)),
                Err(e) => {
                    return self.fail(id, E::FailedOnRunning, now, &format!("run callback on {} failed: {e}", vm.id))
                }
            }
        }
    }

    fn start_postprocessing(&mut self, id: &ExecutionId, now: Instant) {
        if self.emit(id, E::StartedPostprocessing, now).is_err() {
            return;
        }
        let Some(vm) = self.runner_vms(id).into_iter().next() else {
            return self.fail(id, E::FailedOnPostprocessing, now, "no VM carries a runner");
        };
        let r = self
            .providers
            .get_mut(&vm.provider)
            .and_then(|d| d.exec(&vm.id, "./cwb/runner postprocess", ExecMode::FireAndForget, now));
        match r {
            Ok(_) => self.log(id, now, &format!("postprocess callback invoked on {}", vm.id)),
            Err(e) => self.fail(
                id,
                E::FailedOnPostprocessing,
                now,
                &format!("postprocess callback on {} failed: {e}", vm.id),
            ),
        }
    }

    /// Releases every held handle; any failure leaves the rest leaked and
    /// ends in FAILED_ON_RELEASING.
    fn release_resources(&mut self, id: &ExecutionId, now: Instant) {
        let held: Vec<(usize, ResourceHandle)> = self.store.executions[id]
            .resources
            .iter()
            .enumerate()
            .filter(|(_, h)| h.status != HandleStatus::Released)
            .map(|(i, h)| (i, h.clone()))
            .collect();
        let mut failures = Vec::new();
        for (i, h) in held {
            match self.providers.get_mut(&h.provider).and_then(|d| d.release(&h.id, now)) {
                Ok(()) => {
                    self.execution_mut(id).expect("known").resources[i].status = HandleStatus::Released;
                    self.log(id, now, &format!("released {}", h.id));
                }
                Err(e) => failures.push(format!("{}: {e}", h.id)),
            }
        }
        if failures.is_empty() {
            let _ = self.emit(id, E::FinishedReleasingResources, now);
        } else {
            self.fail(
                id,
                E::FailedOnReleasing,
                now,
                &format!("release failed, resources leaked: {}", failures.join("; ")),
            );
        }
    }

    // -----------------------------------------------------------------------
    // Agent requests

    pub fn agent_request(
        &mut self,
        id: &ExecutionId,
        token: &str,
        request: AgentRequest,
        now: Instant,
    ) -> Result<Ack, OrchestratorError> {
        self.execution(id)?;
        if token != self.store.token_for(id) {
            return Err(OrchestratorError::Unauthorized);
        }
        match request {
            AgentRequest::State(update) => {
                let event = update.event;
                if !event.is_agent_event() {
                    return Err(OrchestratorError::Conflict(format!("`{event}` is not an agent event")));
                }
                match self.emit(id, event, now) {
                    Ok(_) => Ok(self.ack(id, false, None)),
                    // A redelivery after a lost response.
                    Err(_) if self.store.executions[id].has_event(event) => Ok(self.ack(id, true, None)),
                    Err(e) => Err(OrchestratorError::Conflict(e.to_string())),
                }
            }
            AgentRequest::Metric(m) => {
                self.check_accepting(id)?;
                if let Some(sid) = &m.submission_id {
                    if self.seen(id, sid) {
                        return Ok(self.ack(id, true, Some(0)));
                    }
                }
                let bench = self.benchmark_of(id).ok_or_else(|| OrchestratorError::BenchmarkNotFound(String::new()))?;
                let obs = results::make_observation(&bench, id, &m.metric, m.value, m.offset_ms, now)?;
                self.store.observations.entry(id.clone()).or_default().push(obs);
                if let Some(sid) = m.submission_id {
                    self.store.seen_submissions.entry(id.clone()).or_default().insert(sid);
                }
                Ok(self.ack(id, false, Some(1)))
            }
            AgentRequest::Csv { batch_id, payload } => {
                self.check_accepting(id)?;
                if self.seen(id, &batch_id) {
                    return Ok(self.ack(id, true, Some(0)));
                }
                let bench = self.benchmark_of(id).ok_or_else(|| OrchestratorError::BenchmarkNotFound(String::new()))?;
                let batch = results::parse_csv_batch(&bench, id, &payload, now)?;
                let n = batch.len();
                self.store.observations.entry(id.clone()).or_default().extend(batch);
                self.store.seen_submissions.entry(id.clone()).or_default().insert(batch_id);
                self.log(id, now, &format!("stored {n} observations"));
                Ok(self.ack(id, false, Some(n)))
            }
        }
    }

    fn seen(&self, id: &ExecutionId, submission: &str) -> bool {
        self.store
            .seen_submissions
            .get(id)
            .is_some_and(|s| s.contains(submission))
    }

    fn check_accepting(&self, id: &ExecutionId) -> Result<(), OrchestratorError> {
        let e = &self.store.executions[id];
        let open = matches!(e.state, S::Running | S::WaitingForStartPostprocessing | S::Postprocessing)
            || (e.dev_mode && !e.state.is_terminal() && e.state != S::ReleasingResources);
        if open {
            Ok(())
        } else {
            Err(OrchestratorError::Conflict(format!(
                "execution in {} does not accept metrics",
                e.state
            )))
        }
    }

    fn ack(&self, id: &ExecutionId, duplicate: bool, count: Option<usize>) -> Ack {
        Ack {
            displayed_status: self.store.executions[id].displayed_status(),
            duplicate,
            count,
        }
    }

    // -----------------------------------------------------------------------
    // Operator actions

    pub fn enter_dev_mode(&mut self, id: &ExecutionId, now: Instant) -> Result<(), OrchestratorError> {
        let e = self.execution(id)?;
        if e.dev_mode {
            return Err(OrchestratorError::InvalidState("already in development mode".into()));
        }
        self.emit(id, E::DevModeEntered, now)
            .map_err(|err| OrchestratorError::InvalidState(err.to_string()))?;
        Ok(())
    }

    pub fn exit_dev_mode(&mut self, id: &ExecutionId, now: Instant) -> Result<(), OrchestratorError> {
        let e = self.execution(id)?;
        if !e.dev_mode {
            return Err(OrchestratorError::NotInDevMode);
        }
        self.emit(id, E::DevModeExited, now)
            .map_err(|err| OrchestratorError::InvalidState(err.to_string()))?;
        Ok(())
    }

    pub fn release_now(&mut self, id: &ExecutionId, now: Instant) -> Result<(), OrchestratorError> {
        let e = self.execution(id)?;
        if e.state.is_terminal() {
            return Err(OrchestratorError::AlreadyTerminal(id.0.clone()));
        }
        if !e.state.is_held_failure() {
            return Err(OrchestratorError::InvalidState(format!(
                "release is only possible from a failure state, execution is {}",
                e.state
            )));
        }
        self.log(id, now, "release requested by operator");
        self.emit(id, E::StartedReleasing, now)?;
        Ok(())
    }

    /// Re-applies provisioning on the held resources and starts another run.
    pub fn reprovision(&mut self, id: &ExecutionId, now: Instant) -> Result<(), OrchestratorError> {
        let e = self.execution(id)?;
        if e.state.is_terminal() || e.state == S::ReleasingResources {
            return Err(OrchestratorError::ResourcesAlreadyReleased);
        }
        if !e.dev_mode {
            return Err(OrchestratorError::NotInDevMode);
        }
        if !e.state.is_held_failure() {
            return Err(OrchestratorError::InvalidState(format!(
                "reprovision needs a failure state, execution is {}",
                e.state
            )));
        }
        if !self.slots.has_free_preparing() {
            return Err(OrchestratorError::NoPreparingSlot);
        }
        let timeout = self.benchmark_of(id).map(|b| b.timeout());
        self.log(id, now, "reprovision requested by operator");
        self.emit(id, E::StartedPreparing, now)?;
        // deadline_at keeps the original budget; the supervisor holds the new one.
        if let Some(t) = timeout {
            self.timeouts.arm(id, DeadlineKind::Run, now + t);
        }
        let resources = &self.store.executions[id].resources;
        if resources.is_empty() {
            // Acquisition failed the first time round.
            self.reacquire(id, now);
        } else if resources.iter().any(|h| h.status == HandleStatus::Requested) {
            self.ready_polls.insert(id.clone(), now);
        } else {
            self.finish_preparing(id, now);
        }
        Ok(())
    }

    fn reacquire(&mut self, id: &ExecutionId, now: Instant) {
        let Some(bench) = self.benchmark_of(id) else { return };
        for spec in &bench.vms {
            match self.providers.get_mut(&spec.provider).and_then(|d| d.acquire(id, spec, now)) {
                Ok(h) => self.execution_mut(id).expect("known").resources.extend(h),
                Err(e) => {
                    return self.fail(id, E::FailedOnPreparing, now, &format!("acquire for role {} failed: {e}", spec.role))
                }
            }
        }
        self.ready_polls.insert(id.clone(), now);
    }

    // -----------------------------------------------------------------------
    // Recovery and reporting

    /// Brings a store loaded after a restart back under supervision: handles
    /// are re-adopted, unfinished executions are failed at their current
    /// phase, and grace timers are re-armed.
    pub fn recover(&mut self, now: Instant) -> RecoveryReport {
        let mut report = RecoveryReport::default();
        let known: BTreeSet<_> = self.providers.all_handles().into_iter().map(|h| h.id).collect();
        let ids: Vec<ExecutionId> = self.store.executions.keys().cloned().collect();
        for id in &ids {
            let exec = &self.store.executions[id];
            for h in exec.resources.clone() {
                if h.status != HandleStatus::Released && !known.contains(&h.id) {
                    if let Ok(d) = self.providers.get_mut(&h.provider) {
                        d.adopt(h);
                        report.adopted_handles += 1;
                    }
                }
            }
        }
        for id in ids {
            let exec = &self.store.executions[&id];
            let state = exec.state;
            let event = match state {
                S::WaitingForStartPreparing | S::Preparing => Some(E::FailedOnPreparing),
                S::WaitingForStartRunning | S::Running => Some(E::FailedOnRunning),
                S::WaitingForStartPostprocessing | S::Postprocessing => Some(E::FailedOnPostprocessing),
                _ => None,
            };
            if let Some(event) = event {
                self.fail(&id, event, now, "server restarted while execution was in progress");
                report.failed.push(id);
            } else if state.is_held_failure() {
                let at = exec.failure_entered_at().unwrap_or(now) + self.grace_of(&id);
                if exec.dev_mode {
                    self.timeouts.suspend_grace_at(&id, at);
                } else {
                    self.timeouts.arm(&id, DeadlineKind::ReleaseGrace, at);
                }
                report.rearmed.push(id);
            } else if state == S::ReleasingResources {
                self.release_resources(&id, now);
                report.failed.push(id);
            }
        }
        report
    }

    /// Unreleased handles owned by executions that already terminated.
    pub fn leaked_resources(&self) -> Vec<ResourceHandle> {
        let execs = &self.store.executions;
        self.providers
            .leaked_resources(|owner| execs.get(owner).is_some_and(|e| e.state.is_terminal()))
    }

    /// Observations of one execution ordered by metric, then offset.
    pub fn observations(&self, id: &ExecutionId) -> Result<Vec<Observation>, OrchestratorError> {
        self.execution(id)?;
        let mut obs = self.store.observations_for(id).to_vec();
        obs.sort_by(|a, b| a.metric.cmp(&b.metric).then(a.offset_ms.cmp(&b.offset_ms)));
        Ok(obs)
    }

    pub fn metrics_csv(&self, id: &ExecutionId) -> Result<String, OrchestratorError> {
        Ok(results::to_csv(&self.observations(id)?))
    }

    /// Variability of `metric` over every execution of `benchmark` that
    /// finished without passing through a failure state.
    pub fn variability(&self, benchmark: &BenchmarkId, metric: &str) -> Result<VariabilityRow, OrchestratorError> {
        let bench = self.benchmark(benchmark)?;
        let def = bench
            .metric(metric)
            .ok_or_else(|| ResultsError::UnknownMetric(metric.to_owned()))?;
        let mut series = Vec::new();
        for e in self.store.executions.values() {
            if e.benchmark_id != *benchmark || e.state != S::Finished || e.displayed_status() != S::Finished.display_name() {
                continue;
            }
            let values: Vec<f64> = self
                .store
                .observations_for(&e.id)
                .iter()
                .filter(|o| o.metric == metric)
                .filter_map(|o| o.value.as_f64())
                .collect();
            if !values.is_empty() {
                series.push(values);
            }
        }
        Ok(results::variability(&bench.name, def.scale, &series)?)
    }

    /// Notes the instant of a snapshot in the store.
    pub fn mark_saved(&mut self, at: Instant) {
        self.store.saved_at = Some(at);
    }

    pub fn into_store(self) -> Store {
        self.store
    }
}
