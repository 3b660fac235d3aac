//! A deterministic in-memory cloud.
//!
//! Every handle gets its own random stream derived from the plan seed and the
//! handle's sequence number, so the behaviour of one execution does not
//! depend on how operations of other executions interleave. The driver never
//! reads a clock: all timing comes from the `now` arguments.

use std::collections::BTreeMap;

use chrono::Duration;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::fault::FaultPlan;
use super::{
    auxiliary_kind, Driver, DriverMessage, ExecMode, ExecOutput, HandleId, HandleStatus, Payload, ProviderError,
    Readiness, ResourceHandle, ResourceKind, SyncReport,
};
use crate::agent::{AgentConfig, AgentRequest, Workload, CONFIG_PATH, RESULTS_PATH, RUNNER_PATH, WORKLOAD_PATH};
use crate::clock::Instant;
use crate::model::{AttrValue, ExecutionId, VmSpec};
use crate::statemachine::ExecutionEvent;

#[derive(Debug, Clone)]
struct SimFile {
    content: Vec<u8>,
    executable: bool,
}

#[derive(Debug)]
struct SimResource {
    handle: ResourceHandle,
    requested_at: Instant,
    ready_at: Instant,
    rng: ChaCha8Rng,
    fs: BTreeMap<String, SimFile>,
    instance_type: String,
}

#[derive(Debug)]
enum Action {
    Deliver(DriverMessage),
    /// Results written by a simulated run; the postprocess phase reads them.
    WriteResults(String),
    /// Postprocessing reads the results file when it actually runs.
    Postprocess { config: AgentConfig },
}

#[derive(Debug)]
struct Pending {
    at: Instant,
    seq: u64,
    handle: HandleId,
    action: Action,
}

#[derive(Debug)]
pub struct SimulatedDriver {
    id: String,
    plan: FaultPlan,
    rng: ChaCha8Rng,
    next_handle: u64,
    resources: BTreeMap<HandleId, SimResource>,
    pending: Vec<Pending>,
    next_seq: u64,
}

impl SimulatedDriver {
    pub fn new(plan: FaultPlan) -> Self {
        Self::with_id("simulated", plan)
    }

    /// Registers under a custom provider id, e.g. to run several fault plans
    /// side by side.
    pub fn with_id(id: impl Into<String>, plan: FaultPlan) -> Self {
        Self {
            id: id.into(),
            rng: ChaCha8Rng::seed_from_u64(plan.seed),
            plan,
            next_handle: 0,
            resources: BTreeMap::new(),
            pending: Vec::new(),
            next_seq: 0,
        }
    }

    pub fn plan(&self) -> &FaultPlan {
        &self.plan
    }

    fn new_handle(
        &mut self,
        owner: &ExecutionId,
        role: &str,
        kind: ResourceKind,
        attached_to: Option<HandleId>,
        now: Instant,
        ready_at: Instant,
        instance_type: &str,
    ) -> ResourceHandle {
        self.next_handle += 1;
        let n = self.next_handle;
        let id = HandleId(format!("{}-{n:06}", self.id));
        let kind_name = match kind {
            ResourceKind::Vm => "vm",
            ResourceKind::BlockStorage => "volume",
            ResourceKind::Address => "address",
        };
        let handle = ResourceHandle {
            id: id.clone(),
            provider: self.id.clone(),
            owner: owner.clone(),
            role: role.to_owned(),
            kind,
            status: HandleStatus::Requested,
            endpoint: format!("sim://{kind_name}/{id}"),
            attached_to,
            details: BTreeMap::new(),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.plan.seed);
        rng.set_stream(n);
        self.resources.insert(
            id,
            SimResource {
                handle: handle.clone(),
                requested_at: now,
                ready_at,
                rng,
                fs: BTreeMap::new(),
                instance_type: instance_type.to_owned(),
            },
        );
        handle
    }

    fn live(&mut self, handle: &HandleId) -> Result<&mut SimResource, ProviderError> {
        let r = self
            .resources
            .get_mut(handle)
            .ok_or_else(|| ProviderError::UnknownHandle(handle.clone()))?;
        match r.handle.status {
            HandleStatus::Released => Err(ProviderError::Released(handle.clone())),
            HandleStatus::Requested => Err(ProviderError::NotReady(handle.clone())),
            HandleStatus::Ready => Ok(r),
        }
    }

    fn schedule(&mut self, at: Instant, handle: &HandleId, action: Action) {
        self.next_seq += 1;
        self.pending.push(Pending {
            at,
            seq: self.next_seq,
            handle: handle.clone(),
            action,
        });
    }

    fn held_vms(&self) -> usize {
        self.resources
            .values()
            .filter(|r| r.handle.kind == ResourceKind::Vm && r.handle.status != HandleStatus::Released)
            .count()
    }

    fn start_phase(&mut self, handle: &HandleId, phase: &str, now: Instant) -> Result<ExecOutput, ProviderError> {
        let plan = self.plan.clone();
        let r = self.live(handle)?;
        if !r.fs.contains_key(RUNNER_PATH) {
            return Ok(ExecOutput {
                exit_code: Some(127),
                stdout: String::new(),
                stderr: format!("{RUNNER_PATH}: not found"),
            });
        }
        let config: Option<AgentConfig> = r
            .fs
            .get(CONFIG_PATH)
            .and_then(|f| serde_json::from_slice(&f.content).ok());
        let workload: Option<Workload> = r
            .fs
            .get(WORKLOAD_PATH)
            .and_then(|f| serde_json::from_slice(&f.content).ok());
        let Some(config) = config else {
            // Agent cannot report anything without its configuration.
            return Ok(ExecOutput::default());
        };
        let agent = |event| {
            Action::Deliver(DriverMessage::Agent {
                execution_id: config.execution_id.clone(),
                token: config.token.clone(),
                request: AgentRequest::state(event),
            })
        };
        match phase {
            "run" => {
                let hang = r.rng.gen_bool(plan.hang_prob);
                let fail = r.rng.gen_bool(plan.run_failure_prob);
                let duration = Duration::seconds(plan.run_duration_secs as i64);
                if hang {
                    return Ok(ExecOutput::default());
                }
                if fail {
                    let a = agent(ExecutionEvent::FailedOnRunning);
                    self.schedule(now + duration / 2, handle, a);
                } else {
                    let csv = synthetic_results(&plan, workload.as_ref(), &r.instance_type, &mut r.rng);
                    self.schedule(now + duration, handle, Action::WriteResults(csv));
                    let a = agent(ExecutionEvent::FinishedRunning);
                    self.schedule(now + duration, handle, a);
                }
            }
            "postprocess" => {
                if r.rng.gen_bool(plan.postprocess_failure_prob) {
                    let a = agent(ExecutionEvent::FailedOnPostprocessing);
                    self.schedule(now + Duration::seconds(1), handle, a);
                } else {
                    let config = config.clone();
                    self.schedule(now + Duration::seconds(2), handle, Action::Postprocess { config });
                }
            }
            _ => {}
        }
        Ok(ExecOutput::default())
    }

    /// Tiny shell for provisioning commands.
    fn run_blocking(&mut self, handle: &HandleId, command: &str) -> Result<ExecOutput, ProviderError> {
        let timeout = self.plan.command_timeout_secs;
        let fault = self.plan.provision_failure_prob;
        let r = self.live(handle)?;
        if r.rng.gen_bool(fault) {
            return Ok(ExecOutput {
                exit_code: Some(1),
                stdout: String::new(),
                stderr: "simulated provisioning fault".into(),
            });
        }
        let mut out = ExecOutput {
            exit_code: Some(0),
            ..ExecOutput::default()
        };
        for part in command.split("&&").map(str::trim) {
            let words: Vec<&str> = part.split_whitespace().collect();
            let code = match words.as_slice() {
                ["sleep", n] => {
                    let secs: f64 = n.parse().unwrap_or(0.0);
                    if secs > timeout as f64 {
                        return Err(ProviderError::ConnectionLost {
                            handle: handle.clone(),
                            detail: format!("command did not finish within {timeout} s"),
                        });
                    }
                    0
                }
                ["test", "-f" | "-e", path] => i32::from(!r.fs.contains_key(&absolute(path))),
                ["true"] | [] => 0,
                ["false"] => 1,
                ["touch", path] => {
                    r.fs.entry(absolute(path)).or_insert(SimFile {
                        content: Vec::new(),
                        executable: false,
                    });
                    0
                }
                ["echo", rest @ ..] => {
                    out.stdout.push_str(&rest.join(" "));
                    out.stdout.push('\n');
                    0
                }
                ["cat", path] => match r.fs.get(&absolute(path)) {
                    Some(f) => {
                        out.stdout.push_str(&String::from_utf8_lossy(&f.content));
                        0
                    }
                    None => {
                        out.stderr.push_str(&format!("cat: {path}: No such file or directory\n"));
                        1
                    }
                },
                _ => 0,
            };
            if code != 0 {
                out.exit_code = Some(code);
                break;
            }
        }
        Ok(out)
    }
}

fn absolute(path: &str) -> String {
    let p = path.trim_start_matches("./");
    if p.starts_with('/') {
        p.to_owned()
    } else {
        format!("/{p}")
    }
}

/// Results file a simulated run leaves behind: the CPU model plus one
/// bandwidth sample per interval over the run.
fn synthetic_results(plan: &FaultPlan, workload: Option<&Workload>, instance_type: &str, rng: &mut ChaCha8Rng) -> String {
    let mut rows = Vec::new();
    if let Some(Workload::SeqWrite(w)) = workload {
        if let Some(cpu) = &w.cpu_metric {
            rows.push((cpu.clone(), format!("Simulated Xeon ({instance_type})"), None));
        }
        let bw = &plan.synthetic_bandwidth;
        let interval = bw.interval_ms.max(1);
        let n = ((plan.run_duration_secs * 1000) / interval).max(1) as usize;
        let trace = bw.generate(rng, n);
        for (i, v) in trace.samples_kbps.iter().enumerate() {
            rows.push((w.bandwidth_metric.clone(), format!("{v:.3}"), Some((i as u64 + 1) * interval)));
        }
    }
    crate::results::csv_from_rows(rows)
}

fn truthy(v: &AttrValue) -> bool {
    match v {
        AttrValue::Bool(b) => *b,
        AttrValue::Number(n) => n.as_f64().is_some_and(|x| x > 0.0),
        AttrValue::String(s) => !s.is_empty(),
        AttrValue::Map(_) => true,
    }
}

impl Driver for SimulatedDriver {
    fn id(&self) -> &str {
        &self.id
    }

    fn acquire(&mut self, owner: &ExecutionId, spec: &VmSpec, now: Instant) -> Result<Vec<ResourceHandle>, ProviderError> {
        if self.plan.max_vms > 0 && self.held_vms() >= self.plan.max_vms {
            return Err(ProviderError::QuotaExceeded(format!(
                "{} VMs already held (limit {})",
                self.held_vms(),
                self.plan.max_vms
            )));
        }
        if self.rng.gen_bool(self.plan.acquire_failure_prob) {
            return Err(ProviderError::AcquireFailed(format!(
                "simulated launch failure for {} in {}",
                spec.instance_type, spec.region
            )));
        }
        let latency = self.plan.acquire_latency.sample(&mut self.rng);
        let ready_at = now + Duration::seconds(latency as i64);
        let mut vm = self.new_handle(owner, &spec.role, ResourceKind::Vm, None, now, ready_at, &spec.instance_type);
        for (k, v) in [
            ("region", &spec.region),
            ("instance_type", &spec.instance_type),
            ("image", &spec.image),
        ] {
            vm.details.insert(k.to_owned(), v.clone());
        }
        let mut out = vec![];
        let mut aux = vec![];
        for (key, value) in &spec.extra_resources {
            match auxiliary_kind(key) {
                Some(kind) if truthy(value) => {
                    let mut h = self.new_handle(owner, &spec.role, kind, Some(vm.id.clone()), now, ready_at, "");
                    h.details
                        .insert(key.clone(), value.scalar_text().unwrap_or_default());
                    self.resources.get_mut(&h.id).expect("just inserted").handle = h.clone();
                    aux.push(h);
                }
                Some(_) => {}
                None => {
                    vm.details
                        .insert(key.clone(), value.scalar_text().unwrap_or_else(|| value.to_json().to_string()));
                }
            }
        }
        self.resources.get_mut(&vm.id).expect("just inserted").handle = vm.clone();
        out.push(vm);
        out.extend(aux);
        Ok(out)
    }

    fn await_ready(&mut self, handle: &HandleId, now: Instant) -> Result<Readiness, ProviderError> {
        let limit = Duration::seconds(self.plan.ready_timeout_secs as i64);
        let r = self
            .resources
            .get_mut(handle)
            .ok_or_else(|| ProviderError::UnknownHandle(handle.clone()))?;
        match r.handle.status {
            HandleStatus::Released => Err(ProviderError::Released(handle.clone())),
            HandleStatus::Ready => Ok(Readiness::Ready(r.handle.clone())),
            HandleStatus::Requested => {
                if r.ready_at - r.requested_at > limit {
                    if now >= r.requested_at + limit {
                        return Err(ProviderError::ReadinessTimeout(handle.clone()));
                    }
                    return Ok(Readiness::NotBefore(r.requested_at + limit));
                }
                if now >= r.ready_at {
                    r.handle.status = HandleStatus::Ready;
                    Ok(Readiness::Ready(r.handle.clone()))
                } else {
                    Ok(Readiness::NotBefore(r.ready_at))
                }
            }
        }
    }

    fn exec(&mut self, handle: &HandleId, command: &str, mode: ExecMode, now: Instant) -> Result<ExecOutput, ProviderError> {
        match mode {
            ExecMode::Blocking => self.run_blocking(handle, command),
            ExecMode::FireAndForget => {
                let words: Vec<&str> = command.split_whitespace().collect();
                match words.as_slice() {
                    [runner, phase] if absolute(runner) == RUNNER_PATH => {
                        let phase = phase.to_string();
                        self.start_phase(handle, &phase, now)
                    }
                    _ => {
                        self.live(handle)?;
                        Ok(ExecOutput::default())
                    }
                }
            }
        }
    }

    fn sync(&mut self, handle: &HandleId, files: &[Payload], _now: Instant) -> Result<SyncReport, ProviderError> {
        let limit = self.plan.max_payload_bytes;
        let fault = self.plan.provision_failure_prob;
        let r = self.live(handle)?;
        if let Some(p) = files.iter().find(|p| p.content.len() > limit) {
            return Err(ProviderError::PayloadTooLarge {
                path: p.path.clone(),
                size: p.content.len(),
                limit,
            });
        }
        if r.rng.gen_bool(fault) {
            return Err(ProviderError::ConnectionLost {
                handle: handle.clone(),
                detail: "simulated transfer interruption".into(),
            });
        }
        let mut report = SyncReport::default();
        for p in files {
            let path = absolute(&p.path);
            let same = r
                .fs
                .get(&path)
                .is_some_and(|f| f.content == p.content && f.executable == p.executable);
            if same {
                report.unchanged.push(path);
            } else {
                r.fs.insert(
                    path.clone(),
                    SimFile {
                        content: p.content.clone(),
                        executable: p.executable,
                    },
                );
                report.written.push(path);
            }
        }
        Ok(report)
    }

    fn read_file(&mut self, handle: &HandleId, path: &str) -> Result<Option<Vec<u8>>, ProviderError> {
        let r = self.live(handle)?;
        Ok(r.fs.get(&absolute(path)).map(|f| f.content.clone()))
    }

    fn release(&mut self, handle: &HandleId, _now: Instant) -> Result<(), ProviderError> {
        let fault = self.plan.release_failure_prob;
        let r = self
            .resources
            .get_mut(handle)
            .ok_or_else(|| ProviderError::UnknownHandle(handle.clone()))?;
        if r.handle.status == HandleStatus::Released {
            return Ok(());
        }
        if r.rng.gen_bool(fault) {
            return Err(ProviderError::ReleaseFailed {
                handle: handle.clone(),
                detail: "simulated termination failure".into(),
            });
        }
        r.handle.status = HandleStatus::Released;
        r.fs.clear();
        self.pending.retain(|p| &p.handle != handle);
        Ok(())
    }

    fn handles(&self) -> Vec<ResourceHandle> {
        self.resources.values().map(|r| r.handle.clone()).collect()
    }

    fn adopt(&mut self, handle: ResourceHandle) {
        if self.resources.contains_key(&handle.id) {
            return;
        }
        let n = handle
            .id
            .0
            .rsplit('-')
            .next()
            .and_then(|s| s.parse::<u64>().ok())
            .unwrap_or(0);
        self.next_handle = self.next_handle.max(n);
        let mut rng = ChaCha8Rng::seed_from_u64(self.plan.seed);
        rng.set_stream(n);
        // Whatever was running on it died with the old server process.
        let epoch = Instant::default();
        self.resources.insert(
            handle.id.clone(),
            SimResource {
                handle,
                requested_at: epoch,
                ready_at: epoch,
                rng,
                fs: BTreeMap::new(),
                instance_type: String::new(),
            },
        );
    }

    fn drain(&mut self, now: Instant) -> Vec<DriverMessage> {
        let mut due: Vec<Pending> = Vec::new();
        let mut i = 0;
        while i < self.pending.len() {
            if self.pending[i].at <= now {
                due.push(self.pending.swap_remove(i));
            } else {
                i += 1;
            }
        }
        due.sort_by_key(|p| (p.at, p.seq));
        let mut out = Vec::new();
        for p in due {
            match p.action {
                Action::Deliver(m) => out.push(m),
                Action::WriteResults(csv) => {
                    if let Some(r) = self.resources.get_mut(&p.handle) {
                        r.fs.insert(
                            RESULTS_PATH.to_owned(),
                            SimFile {
                                content: csv.into_bytes(),
                                executable: false,
                            },
                        );
                    }
                }
                Action::Postprocess { config } => {
                    let results = self
                        .resources
                        .get(&p.handle)
                        .and_then(|r| r.fs.get(RESULTS_PATH))
                        .map(|f| String::from_utf8_lossy(&f.content).into_owned());
                    let msg = |request| DriverMessage::Agent {
                        execution_id: config.execution_id.clone(),
                        token: config.token.clone(),
                        request,
                    };
                    match results {
                        Some(csv) => {
                            out.push(msg(AgentRequest::csv(&config.execution_id, csv)));
                            out.push(msg(AgentRequest::state(ExecutionEvent::FinishedPostprocessing)));
                        }
                        None => out.push(msg(AgentRequest::state(ExecutionEvent::FailedOnPostprocessing))),
                    }
                }
            }
        }
        out
    }

    fn next_wakeup(&self) -> Option<Instant> {
        let pending = self.pending.iter().map(|p| p.at);
        let readiness = self
            .resources
            .values()
            .filter(|r| r.handle.status == HandleStatus::Requested)
            .map(|r| r.ready_at);
        pending.chain(readiness).min()
    }

    fn content_hash(&mut self, handle: &HandleId) -> Result<String, ProviderError> {
        let r = self.live(handle)?;
        let mut h = Sha256::new();
        for (path, f) in &r.fs {
            if path.starts_with("/cwb/log/") {
                continue;
            }
            h.update(path.as_bytes());
            h.update([0, u8::from(f.executable)]);
            h.update((f.content.len() as u64).to_le_bytes());
            h.update(&f.content);
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SimClock;
    use crate::clock::Clock;
    use crate::providers::{LatencySpec, ProviderRegistry};
    use chrono::Duration;

    fn spec(extra: &[(&str, AttrValue)]) -> VmSpec {
        VmSpec {
            role: "driver".into(),
            provider: "simulated".into(),
            region: "eu-west-1".into(),
            instance_type: "m1.small".into(),
            image: "ami-896c96fe".into(),
            extra_resources: extra.iter().map(|(k, v)| (k.to_string(), v.clone())).collect(),
        }
    }

    fn ready_vm(d: &mut SimulatedDriver, clock: &SimClock) -> HandleId {
        let hs = d.acquire(&"e1".into(), &spec(&[]), clock.now()).unwrap();
        clock.advance(Duration::seconds(3600));
        let id = hs[0].id.clone();
        assert!(matches!(d.await_ready(&id, clock.now()).unwrap(), Readiness::Ready(_)));
        id
    }

    #[test]
    fn acquire_failure_forced() {
        let mut d = SimulatedDriver::new(FaultPlan {
            seed: 42,
            acquire_failure_prob: 1.0,
            ..FaultPlan::default()
        });
        let clock = SimClock::at_epoch();
        assert!(matches!(
            d.acquire(&"e1".into(), &spec(&[]), clock.now()),
            Err(ProviderError::AcquireFailed(_))
        ));
    }

    #[test]
    fn ebs_yields_block_storage_handle() {
        let mut d = SimulatedDriver::new(FaultPlan::default());
        let hs = d
            .acquire(
                &"e1".into(),
                &spec(&[("ebs_gb", AttrValue::Number(20.into()))]),
                SimClock::at_epoch().now(),
            )
            .unwrap();
        let kinds: Vec<_> = hs.iter().map(|h| h.kind).collect();
        assert_eq!(kinds, vec![ResourceKind::Vm, ResourceKind::BlockStorage]);
        assert!(hs.iter().all(|h| h.status == HandleStatus::Requested));
        assert_eq!(hs[1].attached_to.as_ref(), Some(&hs[0].id));
        assert_eq!(hs[1].details["ebs_gb"], "20");
    }

    #[test]
    fn fixed_latency_ready_after_three_seconds() {
        let mut d = SimulatedDriver::new(FaultPlan {
            acquire_latency: LatencySpec::fixed(3),
            ..FaultPlan::default()
        });
        let clock = SimClock::at_epoch();
        let t0 = clock.now();
        let id = d.acquire(&"e1".into(), &spec(&[]), t0).unwrap()[0].id.clone();
        assert_eq!(
            d.await_ready(&id, t0).unwrap(),
            Readiness::NotBefore(t0 + Duration::seconds(3))
        );
        clock.advance(Duration::milliseconds(2999));
        assert!(matches!(d.await_ready(&id, clock.now()).unwrap(), Readiness::NotBefore(_)));
        clock.advance(Duration::milliseconds(1));
        match d.await_ready(&id, clock.now()).unwrap() {
            Readiness::Ready(h) => assert_eq!(h.status, HandleStatus::Ready),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn readiness_timeout() {
        let mut d = SimulatedDriver::new(FaultPlan {
            acquire_latency: LatencySpec::fixed(100),
            ready_timeout_secs: 10,
            ..FaultPlan::default()
        });
        let t0 = SimClock::at_epoch().now();
        let id = d.acquire(&"e1".into(), &spec(&[]), t0).unwrap()[0].id.clone();
        assert!(matches!(
            d.await_ready(&id, t0 + Duration::seconds(10)),
            Err(ProviderError::ReadinessTimeout(_))
        ));
    }

    #[test]
    fn released_handle_rejects_operations() {
        let mut d = SimulatedDriver::new(FaultPlan::default());
        let clock = SimClock::at_epoch();
        let id = ready_vm(&mut d, &clock);
        d.release(&id, clock.now()).unwrap();
        let now = clock.now();
        assert!(matches!(d.await_ready(&id, now), Err(ProviderError::Released(_))));
        assert!(matches!(
            d.exec(&id, "true", ExecMode::Blocking, now),
            Err(ProviderError::Released(_))
        ));
        assert!(matches!(
            d.sync(&id, &[Payload::new("/a", "b")], now),
            Err(ProviderError::Released(_))
        ));
        // idempotent
        d.release(&id, now).unwrap();
        assert_eq!(d.handles()[0].status, HandleStatus::Released);
    }

    #[test]
    fn long_command_loses_connection() {
        let mut d = SimulatedDriver::new(FaultPlan {
            command_timeout_secs: 60,
            ..FaultPlan::default()
        });
        let clock = SimClock::at_epoch();
        let id = ready_vm(&mut d, &clock);
        assert!(d.exec(&id, "sleep 59", ExecMode::Blocking, clock.now()).unwrap().success());
        assert!(matches!(
            d.exec(&id, "sleep 61", ExecMode::Blocking, clock.now()),
            Err(ProviderError::ConnectionLost { .. })
        ));
    }

    #[test]
    fn sync_is_idempotent() {
        let mut d = SimulatedDriver::new(FaultPlan::default());
        let clock = SimClock::at_epoch();
        let id = ready_vm(&mut d, &clock);
        let files = [Payload::new("/cwb/runner", "#!/bin/sh\n").executable()];
        let first = d.sync(&id, &files, clock.now()).unwrap();
        assert!(!first.is_noop());
        let hash = d.content_hash(&id).unwrap();
        let second = d.sync(&id, &files, clock.now()).unwrap();
        assert!(second.is_noop());
        assert_eq!(second.unchanged, vec!["/cwb/runner".to_string()]);
        assert_eq!(d.content_hash(&id).unwrap(), hash);
    }

    #[test]
    fn payload_limit() {
        let mut d = SimulatedDriver::new(FaultPlan {
            max_payload_bytes: 4,
            ..FaultPlan::default()
        });
        let clock = SimClock::at_epoch();
        let id = ready_vm(&mut d, &clock);
        assert!(matches!(
            d.sync(&id, &[Payload::new("/big", "12345")], clock.now()),
            Err(ProviderError::PayloadTooLarge { size: 5, .. })
        ));
    }

    #[test]
    fn release_failure_leaks() {
        let mut reg = ProviderRegistry::new().with(SimulatedDriver::new(FaultPlan {
            release_failure_prob: 1.0,
            ..FaultPlan::default()
        }));
        let clock = SimClock::at_epoch();
        let d = reg.get_mut("simulated").unwrap();
        let hs = d.acquire(&"e1".into(), &spec(&[]), clock.now()).unwrap();
        assert!(matches!(
            d.release(&hs[0].id, clock.now()),
            Err(ProviderError::ReleaseFailed { .. })
        ));
        let leaked = reg.leaked_resources(|_| true);
        assert_eq!(leaked.len(), 1);
        assert_eq!(leaked[0].id, hs[0].id);
        assert!(reg.leaked_resources(|_| false).is_empty());
    }

    #[test]
    fn quota() {
        let mut d = SimulatedDriver::new(FaultPlan {
            max_vms: 1,
            ..FaultPlan::default()
        });
        let t = SimClock::at_epoch().now();
        d.acquire(&"e1".into(), &spec(&[]), t).unwrap();
        assert!(matches!(
            d.acquire(&"e2".into(), &spec(&[]), t),
            Err(ProviderError::QuotaExceeded(_))
        ));
    }

    fn provision(d: &mut SimulatedDriver, id: &HandleId, now: Instant) {
        let config = AgentConfig {
            server: "sim".into(),
            execution_id: "e1".into(),
            token: "t".into(),
            role: "driver".into(),
        };
        let workload = serde_json::json!({"kind": "seq_write", "size_bytes": 1024, "block_size": 512,
            "bandwidth_metric": "bw", "cpu_metric": "cpu"});
        d.sync(
            id,
            &[
                Payload::new(CONFIG_PATH, serde_json::to_vec(&config).unwrap()),
                Payload::new(WORKLOAD_PATH, serde_json::to_vec(&workload).unwrap()),
                Payload::new(RUNNER_PATH, "#!/bin/sh\n").executable(),
            ],
            now,
        )
        .unwrap();
    }

    #[test]
    fn run_failure_is_reported_later() {
        let mut d = SimulatedDriver::new(FaultPlan {
            run_failure_prob: 1.0,
            ..FaultPlan::default()
        });
        let clock = SimClock::at_epoch();
        let id = ready_vm(&mut d, &clock);
        provision(&mut d, &id, clock.now());
        let out = d.exec(&id, "./cwb/runner run", ExecMode::FireAndForget, clock.now()).unwrap();
        assert_eq!(out.exit_code, None);
        assert!(d.drain(clock.now()).is_empty());
        let wake = d.next_wakeup().unwrap();
        assert!(wake > clock.now());
        let msgs = d.drain(wake);
        assert_eq!(msgs.len(), 1);
        match &msgs[0] {
            DriverMessage::Agent { request, .. } => {
                assert_eq!(request, &AgentRequest::state(ExecutionEvent::FailedOnRunning))
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn happy_run_then_postprocess() {
        let mut d = SimulatedDriver::new(FaultPlan::default());
        let clock = SimClock::at_epoch();
        let id = ready_vm(&mut d, &clock);
        provision(&mut d, &id, clock.now());
        d.exec(&id, "./cwb/runner run", ExecMode::FireAndForget, clock.now()).unwrap();
        clock.advance(Duration::seconds(120));
        let msgs = d.drain(clock.now());
        assert_eq!(msgs.len(), 1);
        let csv = String::from_utf8(d.read_file(&id, RESULTS_PATH).unwrap().unwrap()).unwrap();
        assert!(csv.starts_with("metric,value,offset_ms\ncpu,Simulated Xeon (m1.small),\n"));
        assert_eq!(csv.lines().count(), 2 + 240);
        d.exec(&id, "./cwb/runner postprocess", ExecMode::FireAndForget, clock.now()).unwrap();
        clock.advance(Duration::seconds(2));
        let msgs = d.drain(clock.now());
        assert_eq!(msgs.len(), 2);
        assert!(matches!(&msgs[0], DriverMessage::Agent { request: AgentRequest::Csv { .. }, .. }));
    }

    #[test]
    fn same_seed_same_behaviour() {
        let run = |seed| {
            let mut d = SimulatedDriver::new(FaultPlan {
                seed,
                acquire_failure_prob: 0.3,
                provision_failure_prob: 0.3,
                acquire_latency: LatencySpec { min_secs: 1, max_secs: 60 },
                ..FaultPlan::default()
            });
            let clock = SimClock::at_epoch();
            let mut trace = Vec::new();
            for i in 0..30 {
                let owner = ExecutionId::from(format!("e{i}"));
                match d.acquire(&owner, &spec(&[]), clock.now()) {
                    Ok(hs) => {
                        trace.push(format!("{:?}", d.await_ready(&hs[0].id, clock.now())));
                        clock.advance(Duration::seconds(61));
                        let _ = d.await_ready(&hs[0].id, clock.now());
                        trace.push(format!("{:?}", d.exec(&hs[0].id, "true", ExecMode::Blocking, clock.now())));
                    }
                    Err(e) => trace.push(e.to_string()),
                }
            }
            trace
        };
        assert_eq!(run(7), run(7));
        assert_ne!(run(7), run(8));
    }
}
