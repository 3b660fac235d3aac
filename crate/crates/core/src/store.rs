//! In-memory collections persisted as one JSON snapshot.
//!
//! Writes go to a temporary file that is then renamed over the snapshot, so
//! a crash leaves either the old or the new state on disk.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::RngCore;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::clock::Instant;
use crate::model::{BenchmarkDefinition, BenchmarkId, Execution, ExecutionId, IdGenerator};
use crate::provisioning::RecipeRegistry;
use crate::results::Observation;
use crate::scheduler::Scheduler;
use crate::statemachine::ExecutionState;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Store {
    pub benchmarks: BTreeMap<BenchmarkId, BenchmarkDefinition>,
    pub executions: BTreeMap<ExecutionId, Execution>,
    pub observations: BTreeMap<ExecutionId, Vec<Observation>>,
    /// CSV batch ids and point submission ids already stored, per execution.
    pub seen_submissions: BTreeMap<ExecutionId, BTreeSet<String>>,
    pub recipes: RecipeRegistry,
    pub scheduler: Scheduler,
    pub ids: IdGenerator,
    /// Key for deriving per-execution agent tokens.
    pub token_secret: String,
    /// Clock reading when the snapshot was written.
    #[serde(default)]
    pub saved_at: Option<Instant>,
}

/// Filters for listing executions. `None` fields match everything.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExecutionFilter {
    /// Matches either the current state or the displayed status.
    pub state: Option<ExecutionState>,
    pub benchmark: Option<BenchmarkId>,
    pub created_after: Option<Instant>,
    pub created_before: Option<Instant>,
}

impl ExecutionFilter {
    pub fn matches(&self, e: &Execution) -> bool {
        if let Some(s) = self.state {
            let displayed = e.displayed_status();
            if e.state != s && displayed != s.display_name() {
                return false;
            }
        }
        if self.benchmark.as_ref().is_some_and(|b| *b != e.benchmark_id) {
            return false;
        }
        if self.created_after.is_some_and(|t| e.created_at < t) {
            return false;
        }
        if self.created_before.is_some_and(|t| e.created_at > t) {
            return false;
        }
        true
    }
}

impl Store {
    /// Empty store with bundled recipes and a random token secret.
    pub fn new() -> Self {
        let mut secret = [0u8; 32];
        rand::thread_rng().fill_bytes(&mut secret);
        Self::with_secret(hex::encode(secret))
    }

    /// Empty store with a fixed token secret (for reproducible runs).
    pub fn with_secret(secret: impl Into<String>) -> Self {
        Self {
            recipes: RecipeRegistry::with_bundled(),
            token_secret: secret.into(),
            ..Self::default()
        }
    }

    pub fn token_for(&self, id: &ExecutionId) -> String {
        let mut h = Sha256::new();
        h.update(self.token_secret.as_bytes());
        h.update([0]);
        h.update(id.as_str().as_bytes());
        hex::encode(h.finalize())
    }

    pub fn executions_matching<'a>(&'a self, f: &'a ExecutionFilter) -> impl Iterator<Item = &'a Execution> + 'a {
        self.executions.values().filter(move |e| f.matches(e))
    }

    pub fn observations_for(&self, id: &ExecutionId) -> &[Observation] {
        self.observations.get(id).map_or(&[], Vec::as_slice)
    }

    /// Latest instant recorded anywhere in the store.
    pub fn latest_instant(&self) -> Option<Instant> {
        self.executions
            .values()
            .flat_map(|e| std::iter::once(e.created_at).chain(e.event_log.iter().map(|l| l.at)))
            .chain(self.observations.values().flatten().map(|o| o.recorded_at))
            .chain(self.saved_at)
            .max()
    }

    pub fn load(path: &Path) -> std::io::Result<Option<Self>> {
        match fs::read(path) {
            Ok(bytes) => serde_json::from_slice(&bytes)
                .map(Some)
                .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn save(&self, path: &Path) -> std::io::Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        let tmp = path.with_extension("tmp");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&serde_json::to_vec(self).expect("store serializes"))?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    }
}
