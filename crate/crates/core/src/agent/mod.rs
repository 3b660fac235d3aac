//! The agent that runs on each resource.
//!
//! Provisioning leaves three files behind: `/cwb/config` (where to report),
//! `/cwb/workload.json` (what to run) and `/cwb/runner`, a shell script that
//! execs `cwb agent callback` with the phase as argument. The orchestrator
//! starts `./cwb/runner run` and later `./cwb/runner postprocess`.
//!
//! Every request is idempotent on the server side, so delivery simply retries
//! with backoff. A request that still fails is written to `/cwb/spool/`.

mod transport;
mod workload;

pub use transport::HttpTransport;
pub use workload::{cpu_model, CommandWorkload, SeqWrite, Workload};

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Duration;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::model::ExecutionId;
use crate::results::SubmittedValue;
use crate::statemachine::ExecutionEvent;

pub const CONFIG_PATH: &str = "/cwb/config";
pub const RUNNER_PATH: &str = "/cwb/runner";
pub const WORKLOAD_PATH: &str = "/cwb/workload.json";
pub const RESULTS_PATH: &str = "/cwb/results.csv";
pub const AGENT_BINARY_PATH: &str = "/cwb/agent";
pub const SPOOL_DIR: &str = "/cwb/spool";

/// Where the agent reports to. The token is never printed.
#[derive(Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentConfig {
    pub server: String,
    pub execution_id: ExecutionId,
    pub token: String,
    pub role: String,
}

impl fmt::Debug for AgentConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("AgentConfig")
            .field("server", &self.server)
            .field("execution_id", &self.execution_id)
            .field("token", &"<redacted>")
            .field("role", &self.role)
            .finish()
    }
}

impl AgentConfig {
    pub fn load(root: &Path) -> Result<Self, AgentError> {
        let path = resource_path(root, CONFIG_PATH);
        let text = fs::read_to_string(&path).map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| AgentError::Config(format!("{}: {e}", path.display())))
    }
}

/// Body of `PUT /agent/executions/{id}/state`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateUpdate {
    pub event: ExecutionEvent,
}

/// Body of `POST /agent/executions/{id}/metrics`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSubmission {
    pub metric: String,
    pub value: SubmittedValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offset_ms: Option<u64>,
    /// Lets the server drop a redelivered submission.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub submission_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AgentRequest {
    State(StateUpdate),
    Metric(MetricSubmission),
    /// `POST /agent/executions/{id}/metrics/csv` with the batch id in the
    /// `X-Batch-Id` header.
    Csv { batch_id: String, payload: String },
}

impl AgentRequest {
    pub fn state(event: ExecutionEvent) -> Self {
        AgentRequest::State(StateUpdate { event })
    }

    pub fn csv(execution_id: &ExecutionId, payload: impl Into<String>) -> Self {
        let payload = payload.into();
        AgentRequest::Csv {
            batch_id: batch_id(execution_id, &payload),
            payload,
        }
    }
}

/// Content-derived batch id, so a resent batch keeps its id.
pub fn batch_id(execution_id: &ExecutionId, payload: &str) -> String {
    let mut h = Sha256::new();
    h.update(execution_id.as_str().as_bytes());
    h.update([0]);
    h.update(payload.as_bytes());
    hex::encode(&h.finalize()[..16])
}

/// Server response to any agent request.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    #[serde(default)]
    pub displayed_status: String,
    #[serde(default)]
    pub duplicate: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SendError {
    /// Transient; the request is retried.
    #[error("network error: {0}")]
    Network(String),
    /// The server understood and refused the request; not retried.
    #[error("server rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
}

pub trait Transport {
    fn send(&mut self, config: &AgentConfig, request: &AgentRequest) -> Result<Ack, SendError>;
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("server rejected request with status {status}: {body}")]
    Rejected { status: u16, body: String },
    #[error("gave up after {attempts} attempts ({last_error}); request spooled to {path}")]
    Spooled {
        attempts: u32,
        last_error: String,
        path: PathBuf,
    },
    #[error("workload failed: {0}")]
    Workload(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub initial_backoff: Duration,
    pub factor: f64,
    /// Relative jitter applied to each delay, e.g. 0.2 for ±20%.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            initial_backoff: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.2,
        }
    }
}

impl RetryPolicy {
    /// Delay after the failed attempt number `attempt` (1-based).
    pub fn delay(&self, attempt: u32, rng: &mut impl Rng) -> Duration {
        let base = self.initial_backoff.as_secs_f64() * self.factor.powi(attempt.saturating_sub(1) as i32);
        let j = if self.jitter > 0.0 {
            rng.gen_range(-self.jitter..=self.jitter)
        } else {
            0.0
        };
        Duration::from_secs_f64(base * (1.0 + j))
    }
}

pub type Sleeper = Box<dyn FnMut(Duration) + Send>;

/// Client side of the agent protocol.
pub struct Agent<T> {
    pub config: AgentConfig,
    transport: T,
    policy: RetryPolicy,
    spool_dir: PathBuf,
    sleeper: Sleeper,
    rng: ChaCha8Rng,
    spooled: u32,
}

impl<T: Transport> Agent<T> {
    pub fn new(config: AgentConfig, transport: T, spool_dir: impl Into<PathBuf>) -> Self {
        Self {
            config,
            transport,
            policy: RetryPolicy::default(),
            spool_dir: spool_dir.into(),
            sleeper: Box::new(std::thread::sleep),
            rng: ChaCha8Rng::from_entropy(),
            spooled: 0,
        }
    }

    pub fn with_policy(mut self, policy: RetryPolicy) -> Self {
        self.policy = policy;
        self
    }

    pub fn with_sleeper(mut self, sleeper: Sleeper) -> Self {
        self.sleeper = sleeper;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng = ChaCha8Rng::seed_from_u64(seed);
        self
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    /// Sends `request`, retrying transient failures. When every attempt
    /// fails the request is spooled and an error returned.
    pub fn deliver(&mut self, request: &AgentRequest) -> Result<Ack, AgentError> {
        let mut last_error = String::new();
        for attempt in 1..=self.policy.max_attempts.max(1) {
            match self.transport.send(&self.config, request) {
                Ok(ack) => return Ok(ack),
                Err(SendError::Rejected { status, body }) => return Err(AgentError::Rejected { status, body }),
                Err(SendError::Network(e)) => {
                    tracing::warn!(attempt, error = %e, "agent request failed");
                    last_error = e;
                    if attempt < self.policy.max_attempts {
                        let d = self.policy.delay(attempt, &mut self.rng);
                        (self.sleeper)(d);
                    }
                }
            }
        }
        let path = self.spool(request)?;
        Err(AgentError::Spooled {
            attempts: self.policy.max_attempts.max(1),
            last_error,
            path,
        })
    }

    pub fn notify(&mut self, event: ExecutionEvent) -> Result<Ack, AgentError> {
        self.deliver(&AgentRequest::state(event))
    }

    pub fn submit(
        &mut self,
        metric: &str,
        value: SubmittedValue,
        offset_ms: Option<u64>,
    ) -> Result<Ack, AgentError> {
        let mut h = Sha256::new();
        h.update(format!("{}|{metric}|{value:?}|{offset_ms:?}", self.config.execution_id).as_bytes());
        let req = AgentRequest::Metric(MetricSubmission {
            metric: metric.to_owned(),
            value,
            offset_ms,
            submission_id: Some(hex::encode(&h.finalize()[..16])),
        });
        self.deliver(&req)
    }

    pub fn submit_csv(&mut self, payload: &str) -> Result<Ack, AgentError> {
        let req = AgentRequest::csv(&self.config.execution_id, payload);
        self.deliver(&req)
    }

    fn spool(&mut self, request: &AgentRequest) -> Result<PathBuf, AgentError> {
        fs::create_dir_all(&self.spool_dir)?;
        let millis = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_millis())
            .unwrap_or(0);
        self.spooled += 1;
        let path = self
            .spool_dir
            .join(format!("{millis:013}-{}-{:03}.json", std::process::id(), self.spooled));
        let entry = SpoolEntry {
            execution_id: self.config.execution_id.clone(),
            request: request.clone(),
        };
        fs::write(&path, serde_json::to_vec_pretty(&entry).expect("spool entries serialize"))?;
        Ok(path)
    }

    /// Resends spooled requests in file-name order, deleting each one that
    /// the server accepted or refused. Returns how many were resent.
    pub fn flush_spool(&mut self) -> Result<usize, AgentError> {
        let mut files: Vec<PathBuf> = match fs::read_dir(&self.spool_dir) {
            Ok(rd) => rd.filter_map(|e| e.ok().map(|e| e.path())).collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(0),
            Err(e) => return Err(e.into()),
        };
        files.sort();
        let mut sent = 0;
        for f in files {
            let entry: SpoolEntry = serde_json::from_slice(&fs::read(&f)?)
                .map_err(|e| AgentError::Config(format!("{}: {e}", f.display())))?;
            match self.transport.send(&self.config, &entry.request) {
                Ok(_) | Err(SendError::Rejected { .. }) => {
                    fs::remove_file(&f)?;
                    sent += 1;
                }
                Err(SendError::Network(e)) => return Err(AgentError::Workload(format!("server still unreachable: {e}"))),
            }
        }
        Ok(sent)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SpoolEntry {
    execution_id: ExecutionId,
    request: AgentRequest,
}

/// Maps an absolute resource path (`/cwb/config`) under `root`.
pub fn resource_path(root: &Path, path: &str) -> PathBuf {
    root.join(path.trim_start_matches('/'))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Run,
    Postprocess,
}

impl std::str::FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "run" => Ok(Phase::Run),
            "postprocess" => Ok(Phase::Postprocess),
            other => Err(format!("unknown phase `{other}` (expected run or postprocess)")),
        }
    }
}

/// Runs one callback phase inside the resource rooted at `root`.
///
/// `run` executes the workload, writes `/cwb/results.csv` and reports
/// `finished_running`; any workload error reports `failed_on_running`.
/// `postprocess` submits the results file and reports
/// `finished_postprocessing`, or `failed_on_postprocessing` if the server
/// refuses the batch.
pub fn run_callback<T: Transport>(root: &Path, phase: Phase, agent: &mut Agent<T>) -> Result<(), AgentError> {
    match phase {
        Phase::Run => {
            let outcome = Workload::load(root).and_then(|w| w.execute(root));
            match outcome {
                Ok(csv) => {
                    fs::write(resource_path(root, RESULTS_PATH), csv)?;
                    agent.notify(ExecutionEvent::FinishedRunning)?;
                    Ok(())
                }
                Err(e) => {
                    eprintln!("workload failed: {e}");
                    agent.notify(ExecutionEvent::FailedOnRunning)?;
                    Err(e)
                }
            }
        }
        Phase::Postprocess => {
            let submitted = fs::read_to_string(resource_path(root, RESULTS_PATH))
                .map_err(AgentError::from)
                .and_then(|csv| agent.submit_csv(&csv));
            match submitted {
                Ok(ack) => {
                    eprintln!("submitted {} observations", ack.count.unwrap_or(0));
                    agent.notify(ExecutionEvent::FinishedPostprocessing)?;
                    Ok(())
                }
                Err(e @ (AgentError::Rejected { .. } | AgentError::Io(_))) => {
                    eprintln!("postprocessing failed: {e}");
                    agent.notify(ExecutionEvent::FailedOnPostprocessing)?;
                    Err(e)
                }
                Err(e) => Err(e),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::{Arc, Mutex};

    /// Fails the first `failures` sends with a network error.
    struct Flaky {
        failures: u32,
        calls: u32,
        sent: Vec<AgentRequest>,
    }

    impl Transport for Flaky {
        fn send(&mut self, _: &AgentConfig, request: &AgentRequest) -> Result<Ack, SendError> {
            self.calls += 1;
            if self.calls <= self.failures {
                return Err(SendError::Network("connection refused".into()));
            }
            self.sent.push(request.clone());
            Ok(Ack {
                displayed_status: "RUNNING".into(),
                ..Ack::default()
            })
        }
    }

    fn config() -> AgentConfig {
        AgentConfig {
            server: "http://127.0.0.1:1".into(),
            execution_id: "exec-1".into(),
            token: "secret-token".into(),
            role: "driver".into(),
        }
    }

    fn recording_sleeper() -> (Sleeper, Arc<Mutex<Vec<Duration>>>) {
        let delays = Arc::new(Mutex::new(Vec::new()));
        let d = delays.clone();
        (Box::new(move |x| d.lock().unwrap().push(x)), delays)
    }

    #[test]
    fn debug_redacts_token() {
        let s = format!("{:?}", config());
        assert!(!s.contains("secret-token"));
        assert!(s.contains("redacted"));
    }

    #[test]
    fn retries_then_succeeds() {
        let dir = tempfile::tempdir().unwrap();
        let (sleeper, delays) = recording_sleeper();
        let t = Flaky {
            failures: 2,
            calls: 0,
            sent: vec![],
        };
        let mut agent = Agent::new(config(), t, dir.path().join("spool"))
            .with_sleeper(sleeper)
            .with_seed(1);
        let ack = agent.notify(ExecutionEvent::FinishedRunning).unwrap();
        assert_eq!(ack.displayed_status, "RUNNING");
        let delays = delays.lock().unwrap();
        assert_eq!(delays.len(), 2);
        assert!(delays[0] >= Duration::from_millis(800) && delays[0] <= Duration::from_millis(1200));
        assert!(delays[1] >= Duration::from_millis(1600) && delays[1] <= Duration::from_millis(2400));
    }

    #[test]
    fn unreachable_server_spools_after_three_attempts() {
        let dir = tempfile::tempdir().unwrap();
        let (sleeper, delays) = recording_sleeper();
        let t = Flaky {
            failures: u32::MAX,
            calls: 0,
            sent: vec![],
        };
        let spool = dir.path().join("spool");
        let mut agent = Agent::new(config(), t, &spool)
            .with_policy(RetryPolicy {
                max_attempts: 3,
                ..RetryPolicy::default()
            })
            .with_sleeper(sleeper);
        let err = agent.notify(ExecutionEvent::FinishedRunning).unwrap_err();
        match err {
            AgentError::Spooled { attempts, path, .. } => {
                assert_eq!(attempts, 3);
                let text = fs::read_to_string(path).unwrap();
                assert!(text.contains("finished_running"));
                assert!(!text.contains("secret-token"));
            }
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(agent.transport().calls, 3);
        assert_eq!(delays.lock().unwrap().len(), 2);
    }

    #[test]
    fn spool_flushes_once_server_is_back() {
        let dir = tempfile::tempdir().unwrap();
        let spool = dir.path().join("spool");
        let t = Flaky {
            failures: 2,
            calls: 0,
            sent: vec![],
        };
        let mut agent = Agent::new(config(), t, &spool)
            .with_policy(RetryPolicy {
                max_attempts: 2,
                ..RetryPolicy::default()
            })
            .with_sleeper(Box::new(|_| {}));
        assert!(agent.notify(ExecutionEvent::FinishedRunning).is_err());
        assert_eq!(agent.flush_spool().unwrap(), 1);
        assert_eq!(fs::read_dir(&spool).unwrap().count(), 0);
        assert_eq!(agent.transport().sent, vec![AgentRequest::state(ExecutionEvent::FinishedRunning)]);
    }

    #[test]
    fn rejection_is_not_retried() {
        struct Refuse(u32);
        impl Transport for Refuse {
            fn send(&mut self, _: &AgentConfig, _: &AgentRequest) -> Result<Ack, SendError> {
                self.0 += 1;
                Err(SendError::Rejected {
                    status: 409,
                    body: "illegal transition".into(),
                })
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let mut agent = Agent::new(config(), Refuse(0), dir.path()).with_sleeper(Box::new(|_| {}));
        assert!(matches!(
            agent.notify(ExecutionEvent::FinishedRunning),
            Err(AgentError::Rejected { status: 409, .. })
        ));
        assert_eq!(agent.transport().0, 1);
    }

    #[test]
    fn batch_id_is_content_derived() {
        let e = ExecutionId::from("x");
        assert_eq!(batch_id(&e, "a"), batch_id(&e, "a"));
        assert_ne!(batch_id(&e, "a"), batch_id(&e, "b"));
        assert_ne!(batch_id(&e, "a"), batch_id(&ExecutionId::from("y"), "a"));
    }

    #[test]
    fn request_wire_format() {
        let v = serde_json::to_value(AgentRequest::state(ExecutionEvent::FinishedRunning)).unwrap();
        assert_eq!(v, serde_json::json!({"type": "state", "event": "finished_running"}));
        let m: MetricSubmission =
            serde_json::from_str(r#"{"metric":"cpu_model","value":"Intel Xeon"}"#).unwrap();
        assert_eq!(m.value, SubmittedValue::Text("Intel Xeon".into()));
    }

    #[test]
    fn run_phase_failure_reports_failed_on_running() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("cwb")).unwrap();
        fs::write(
            root.join("cwb/workload.json"),
            r#"{"kind":"command","command":"exit 3"}"#,
        )
        .unwrap();
        let t = Flaky {
            failures: 0,
            calls: 0,
            sent: vec![],
        };
        let mut agent = Agent::new(config(), t, root.join("cwb/spool"));
        assert!(run_callback(root, Phase::Run, &mut agent).is_err());
        assert_eq!(agent.transport().sent, vec![AgentRequest::state(ExecutionEvent::FailedOnRunning)]);
    }

    #[test]
    fn command_workload_then_postprocess() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        fs::create_dir_all(root.join("cwb")).unwrap();
        fs::write(
            root.join("cwb/workload.json"),
            r#"{"kind":"command","command":"printf 'metric,value,offset_ms\nlatency_ms,4.5,0\n' > \"$CWB_RESULTS\""}"#,
        )
        .unwrap();
        let t = Flaky {
            failures: 0,
            calls: 0,
            sent: vec![],
        };
        let mut agent = Agent::new(config(), t, root.join("cwb/spool"));
        run_callback(root, Phase::Run, &mut agent).unwrap();
        run_callback(root, Phase::Postprocess, &mut agent).unwrap();
        let sent = &agent.transport().sent;
        assert_eq!(sent.len(), 3);
        assert_eq!(sent[0], AgentRequest::state(ExecutionEvent::FinishedRunning));
        match &sent[1] {
            AgentRequest::Csv { payload, .. } => assert_eq!(payload, "metric,value,offset_ms\nlatency_ms,4.5,0\n"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(sent[2], AgentRequest::state(ExecutionEvent::FinishedPostprocessing));
    }
}
