//! Cloud provider drivers.
//!
//! A [`Driver`] acquires resources for a VM spec, reports when they are
//! reachable, runs commands and syncs files on them, and releases them.
//! Two drivers ship: [`SimulatedDriver`], a seeded fault-injecting cloud that
//! runs entirely on the injected clock, and [`LocalDriver`], which maps each
//! "VM" to a sandbox directory and real subprocesses.
//!
//! Paths passed to `sync` and `read_file` are absolute inside the resource
//! (`/cwb/config`); commands run with the resource root as working directory.

mod fault;
mod local;
mod simulated;

pub use fault::{BandwidthSpec, FaultPlan, LatencySpec};
pub use local::{LocalDriver, LocalDriverConfig};
pub use simulated::SimulatedDriver;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::AgentRequest;
use crate::clock::Instant;
use crate::model::{ExecutionId, VmSpec};

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct HandleId(pub String);

impl fmt::Display for HandleId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for HandleId {
    fn from(s: &str) -> Self {
        Self(s.to_owned())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResourceKind {
    Vm,
    BlockStorage,
    Address,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HandleStatus {
    Requested,
    Ready,
    Released,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceHandle {
    pub id: HandleId,
    pub provider: String,
    pub owner: ExecutionId,
    pub role: String,
    pub kind: ResourceKind,
    pub status: HandleStatus,
    /// Driver-specific connection descriptor (`sim://vm/...`, `local:/tmp/...`).
    pub endpoint: String,
    /// For auxiliary resources: the VM handle they are attached to.
    pub attached_to: Option<HandleId>,
    pub details: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Readiness {
    Ready(ResourceHandle),
    NotBefore(Instant),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecMode {
    Blocking,
    FireAndForget,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecOutput {
    /// `None` for fire-and-forget commands.
    pub exit_code: Option<i32>,
    pub stdout: String,
    pub stderr: String,
}

impl ExecOutput {
    pub fn success(&self) -> bool {
        self.exit_code == Some(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Payload {
    pub path: String,
    pub content: Vec<u8>,
    pub executable: bool,
}

impl Payload {
    pub fn new(path: impl Into<String>, content: impl Into<Vec<u8>>) -> Self {
        Self {
            path: path.into(),
            content: content.into(),
            executable: false,
        }
    }

    pub fn executable(mut self) -> Self {
        self.executable = true;
        self
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SyncReport {
    pub written: Vec<String>,
    pub unchanged: Vec<String>,
}

impl SyncReport {
    pub fn is_noop(&self) -> bool {
        self.written.is_empty()
    }
}

/// Output a driver collected asynchronously since the last drain.
#[derive(Debug, Clone, PartialEq)]
pub enum DriverMessage {
    /// Output of a fire-and-forget process.
    Log { owner: ExecutionId, text: String },
    /// A request an agent on the resource sent to the server. Only the
    /// simulated driver produces these; real agents talk HTTP.
    Agent {
        execution_id: ExecutionId,
        token: String,
        request: AgentRequest,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProviderError {
    #[error("quota exceeded: {0}")]
    QuotaExceeded(String),
    #[error("provider `{0}` unavailable")]
    ProviderUnavailable(String),
    #[error("acquire failed: {0}")]
    AcquireFailed(String),
    #[error("resource {0} not ready within the readiness timeout")]
    ReadinessTimeout(HandleId),
    #[error("connection lost to {handle}: {detail}")]
    ConnectionLost { handle: HandleId, detail: String },
    #[error("payload {path} is {size} bytes, limit {limit}")]
    PayloadTooLarge { path: String, size: usize, limit: usize },
    #[error("release of {handle} failed: {detail}")]
    ReleaseFailed { handle: HandleId, detail: String },
    #[error("operation on released resource {0}")]
    Released(HandleId),
    #[error("resource {0} is not ready")]
    NotReady(HandleId),
    #[error("unknown resource {0}")]
    UnknownHandle(HandleId),
}

pub trait Driver: Send {
    fn id(&self) -> &str;

    /// Requests the resources for one VM spec: the VM plus one handle per
    /// auxiliary request. Returns immediately with `requested` handles.
    fn acquire(
        &mut self,
        owner: &ExecutionId,
        spec: &VmSpec,
        now: Instant,
    ) -> Result<Vec<ResourceHandle>, ProviderError>;

    /// Ready handle, or the instant before which polling is pointless.
    fn await_ready(&mut self, handle: &HandleId, now: Instant) -> Result<Readiness, ProviderError>;

    fn exec(
        &mut self,
        handle: &HandleId,
        command: &str,
        mode: ExecMode,
        now: Instant,
    ) -> Result<ExecOutput, ProviderError>;

    fn sync(&mut self, handle: &HandleId, files: &[Payload], now: Instant) -> Result<SyncReport, ProviderError>;

    fn read_file(&mut self, handle: &HandleId, path: &str) -> Result<Option<Vec<u8>>, ProviderError>;

    /// Releasing a released handle is a no-op.
    fn release(&mut self, handle: &HandleId, now: Instant) -> Result<(), ProviderError>;

    /// Every handle this driver knows about, in id order.
    fn handles(&self) -> Vec<ResourceHandle>;

    /// Takes over a handle persisted by a previous server process.
    fn adopt(&mut self, handle: ResourceHandle);

    /// Collects asynchronous output due at or before `now`.
    fn drain(&mut self, now: Instant) -> Vec<DriverMessage>;

    /// Earliest instant at which `drain` will have something new, if known.
    fn next_wakeup(&self) -> Option<Instant> {
        None
    }

    /// Digest of the resource's file tree (excluding process logs).
    fn content_hash(&mut self, handle: &HandleId) -> Result<String, ProviderError>;
}

/// Drivers keyed by provider id.
#[derive(Default)]
pub struct ProviderRegistry {
    drivers: BTreeMap<String, Box<dyn Driver>>,
}

impl fmt::Debug for ProviderRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ProviderRegistry")
            .field("drivers", &self.drivers.keys().collect::<Vec<_>>())
            .finish()
    }
}

impl ProviderRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, driver: Box<dyn Driver>) {
        self.drivers.insert(driver.id().to_owned(), driver);
    }

    pub fn with(mut self, driver: impl Driver + 'static) -> Self {
        self.register(Box::new(driver));
        self
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.drivers.keys().map(String::as_str)
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut (dyn Driver + 'static), ProviderError> {
        self.drivers
            .get_mut(id)
            .map(|d| d.as_mut())
            .ok_or_else(|| ProviderError::ProviderUnavailable(id.to_owned()))
    }

    pub fn drain_all(&mut self, now: Instant) -> Vec<DriverMessage> {
        self.drivers.values_mut().flat_map(|d| d.drain(now)).collect()
    }

    pub fn next_wakeup(&self) -> Option<Instant> {
        self.drivers.values().filter_map(|d| d.next_wakeup()).min()
    }

    pub fn all_handles(&self) -> Vec<ResourceHandle> {
        self.drivers.values().flat_map(|d| d.handles()).collect()
    }

    /// Unreleased handles whose owning execution has terminated.
    pub fn leaked_resources<F>(&self, owner_terminated: F) -> Vec<ResourceHandle>
    where
        F: Fn(&ExecutionId) -> bool,
    {
        self.all_handles()
            .into_iter()
            .filter(|h| h.status != HandleStatus::Released && owner_terminated(&h.owner))
            .collect()
    }
}

/// Maps the conventional extra-resource keys to auxiliary handle kinds.
/// Unknown keys stay as details on the VM handle.
pub(crate) fn auxiliary_kind(key: &str) -> Option<ResourceKind> {
    match key {
        "ebs_gb" | "block_storage_gb" | "volume_gb" => Some(ResourceKind::BlockStorage),
        "public_ip" | "elastic_ip" | "address" => Some(ResourceKind::Address),
        _ => None,
    }
}
