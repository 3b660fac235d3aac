//! Recipes and the step engine that converges a resource to them.
//!
//! A recipe is a JSON document:
//!
//! ```json
//! {"name": "hello", "version": "1.0.0",
//!  "default_attributes": {"greeting": "hi"},
//!  "steps": [{"kind": "write_file", "path": "/etc/motd", "content": "{{greeting}}\n"}]}
//! ```
//!
//! Strings in steps may reference effective attributes as `{{dotted.path}}`.
//! The `cwb.*` namespace is reserved and filled in at apply time
//! (`cwb.execution_id`, `cwb.role`, `cwb.server`). Every step first checks
//! whether its desired state already holds and then does nothing, so applying
//! a recipe twice leaves the resource untouched the second time.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::agent::{
    AgentConfig, CommandWorkload, SeqWrite, Workload, CONFIG_PATH, RUNNER_PATH, WORKLOAD_PATH,
};
use crate::clock::Instant;
use crate::model::{attr_lookup, AttrValue, AttributeMap, BenchmarkDefinition, RecipeRef};
use crate::providers::{Driver, ExecMode, HandleId, Payload, ProviderError};

/// Package manifest kept inside each resource.
pub const PACKAGE_MANIFEST: &str = "/cwb/packages";

const BUNDLED: &[&str] = &[include_str!("../recipes/fio-benchmark-0.3.0.json")];

/// The recipes shipped with the crate.
pub fn bundled_recipes() -> Vec<Recipe> {
    BUNDLED
        .iter()
        .map(|text| Recipe::from_json(text).expect("bundled recipes are valid"))
        .collect()
}

/// Runner script installed at `/cwb/runner`. It hands the phase argument to
/// the agent binary synced to `/cwb/agent`.
pub const RUNNER_SCRIPT: &str = "#!/bin/sh\n\
# Benchmark callback: runner run|postprocess\n\
ROOT=\"$(cd \"$(dirname \"$0\")/..\" && pwd)\"\n\
exec \"$ROOT/cwb/agent\" agent callback --root \"$ROOT\" \"$@\"\n";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Recipe {
    pub name: String,
    pub version: String,
    #[serde(default)]
    pub default_attributes: AttributeMap,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Step {
    /// Recorded in the package manifest; no root access needed.
    InstallPackage { package: String },
    WriteFile {
        path: String,
        content: String,
        #[serde(default)]
        executable: bool,
    },
    /// Writes the agent configuration, the workload description and the
    /// runner callback script.
    RenderRunner { workload: RunnerTemplate },
    /// Runs `command` unless `guard` exits 0.
    Shell { command: String, guard: String },
}

impl Step {
    pub fn kind(&self) -> &'static str {
        match self {
            Step::InstallPackage { .. } => "install_package",
            Step::WriteFile { .. } => "write_file",
            Step::RenderRunner { .. } => "render_runner",
            Step::Shell { .. } => "shell",
        }
    }
}

/// Workload with templated string fields; converted to a typed
/// [`Workload`] after rendering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum RunnerTemplate {
    SeqWrite {
        #[serde(default)]
        file: Option<String>,
        size: String,
        block_size: String,
        #[serde(default)]
        refill_buffers: Option<String>,
        #[serde(default)]
        fsync: Option<String>,
        #[serde(default)]
        interval_ms: Option<String>,
        #[serde(default)]
        min_runtime_secs: Option<String>,
        bandwidth_metric: String,
        #[serde(default)]
        cpu_metric: Option<String>,
    },
    Command {
        command: String,
    },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProvisioningError {
    #[error("recipe {0} not found")]
    RecipeNotFound(String),
    #[error("recipe {0} is already registered")]
    DuplicateRecipe(String),
    #[error("invalid recipe: {0}")]
    InvalidRecipe(String),
    #[error("role `{0}` is not defined by the benchmark")]
    RoleNotFound(String),
    #[error("step {index} failed: {detail}")]
    StepFailed { index: usize, detail: String },
    #[error("connection lost: {0}")]
    ConnectionLost(String),
    #[error("execution is not in development mode")]
    NotInDevMode,
    #[error("resources of the execution were already released")]
    ResourcesAlreadyReleased,
}

impl Recipe {
    pub fn from_json(text: &str) -> Result<Self, ProvisioningError> {
        let r: Recipe = serde_json::from_str(text).map_err(|e| ProvisioningError::InvalidRecipe(e.to_string()))?;
        r.validate()?;
        Ok(r)
    }

    pub fn reference(&self) -> RecipeRef {
        RecipeRef {
            name: self.name.clone(),
            version: self.version.clone(),
        }
    }

    pub fn validate(&self) -> Result<(), ProvisioningError> {
        RecipeRef::parse(&format!("{}@{}", self.name, self.version))
            .map_err(|e| ProvisioningError::InvalidRecipe(e.to_string()))?;
        if self.steps.is_empty() {
            return Err(ProvisioningError::InvalidRecipe(format!(
                "{}@{} has no steps",
                self.name, self.version
            )));
        }
        Ok(())
    }
}

/// Recipes keyed by exact `name@version`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RecipeRegistry {
    recipes: BTreeMap<String, Recipe>,
}

impl RecipeRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_bundled() -> Self {
        let mut r = Self::new();
        for recipe in bundled_recipes() {
            r.upsert(recipe).expect("bundled recipes are valid");
        }
        r
    }

    /// Adds a recipe; an existing `name@version` is an error.
    pub fn register(&mut self, recipe: Recipe) -> Result<RecipeRef, ProvisioningError> {
        let key = recipe.reference().to_string();
        if self.recipes.contains_key(&key) {
            return Err(ProvisioningError::DuplicateRecipe(key));
        }
        self.upsert(recipe)
    }

    /// Adds or replaces a recipe (used when fixing a recipe in dev mode).
    pub fn upsert(&mut self, recipe: Recipe) -> Result<RecipeRef, ProvisioningError> {
        recipe.validate()?;
        let r = recipe.reference();
        self.recipes.insert(r.to_string(), recipe);
        Ok(r)
    }

    pub fn get(&self, r: &RecipeRef) -> Result<&Recipe, ProvisioningError> {
        self.recipes
            .get(&r.to_string())
            .ok_or_else(|| ProvisioningError::RecipeNotFound(r.to_string()))
    }

    pub fn list(&self) -> impl Iterator<Item = &Recipe> {
        self.recipes.values()
    }
}

/// Deep merge: maps merge recursively, anything else in `overrides`
/// replaces the default.
pub fn merge(defaults: &AttributeMap, overrides: &AttributeMap) -> AttributeMap {
    let mut out = defaults.clone();
    for (k, o) in overrides {
        let merged = match (out.get(k), o) {
            (Some(AttrValue::Map(d)), AttrValue::Map(o)) => AttrValue::Map(merge(d, o)),
            _ => o.clone(),
        };
        out.insert(k.clone(), merged);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedRecipe {
    pub recipe: Recipe,
    pub attributes: AttributeMap,
}

/// Recipes bound to `role`, in document order, with effective attributes.
pub fn resolve(
    registry: &RecipeRegistry,
    benchmark: &BenchmarkDefinition,
    role: &str,
) -> Result<Vec<ResolvedRecipe>, ProvisioningError> {
    if !benchmark.roles().any(|r| r == role) {
        return Err(ProvisioningError::RoleNotFound(role.to_owned()));
    }
    benchmark
        .bindings_for(role)
        .map(|b| {
            let recipe = registry.get(&b.recipe)?.clone();
            let attributes = merge(&recipe.default_attributes, &b.attributes);
            Ok(ResolvedRecipe { recipe, attributes })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", content = "detail", rename_all = "snake_case")]
pub enum StepOutcome {
    Changed,
    /// Desired state already held.
    Skipped,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StepReport {
    pub recipe: String,
    /// Position across all applied recipes.
    pub index: usize,
    pub kind: String,
    pub description: String,
    pub outcome: StepOutcome,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ProvisionReport {
    pub steps: Vec<StepReport>,
    /// Why the run stopped early, if it did.
    pub error: Option<String>,
    #[serde(skip)]
    failure: Option<ProvisioningError>,
}

impl ProvisionReport {
    pub fn succeeded(&self) -> bool {
        self.failure.is_none()
    }

    pub fn failure(&self) -> Option<&ProvisioningError> {
        self.failure.as_ref()
    }

    pub fn changed(&self) -> usize {
        self.count(|o| *o == StepOutcome::Changed)
    }

    pub fn skipped(&self) -> usize {
        self.count(|o| *o == StepOutcome::Skipped)
    }

    fn count(&self, f: impl Fn(&StepOutcome) -> bool) -> usize {
        self.steps.iter().filter(|s| f(&s.outcome)).count()
    }

    pub fn into_result(self) -> Result<ProvisionReport, ProvisioningError> {
        match self.failure.clone() {
            Some(e) => Err(e),
            None => Ok(self),
        }
    }

    fn fail(&mut self, e: ProvisioningError) {
        self.error = Some(e.to_string());
        self.failure = Some(e);
    }
}

impl fmt::Display for ProvisionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for s in &self.steps {
            let outcome = match &s.outcome {
                StepOutcome::Changed => "changed".to_owned(),
                StepOutcome::Skipped => "skipped".to_owned(),
                StepOutcome::Failed(d) => format!("failed: {d}"),
            };
            writeln!(f, "[{}] {} {} ({}) {outcome}", s.index, s.recipe, s.kind, s.description)?;
        }
        Ok(())
    }
}

/// Per-resource facts available to templates and the runner.
#[derive(Debug, Clone)]
pub struct ApplyContext {
    pub agent: AgentConfig,
}

impl ApplyContext {
    fn builtins(&self) -> AttrValue {
        let mut m = AttributeMap::new();
        m.insert("execution_id".into(), self.agent.execution_id.as_str().into());
        m.insert("role".into(), self.agent.role.as_str().into());
        m.insert("server".into(), self.agent.server.as_str().into());
        AttrValue::Map(m)
    }
}

/// Replaces every `{{path}}` with the attribute's scalar text.
pub fn render_template(text: &str, attrs: &AttributeMap) -> Result<String, String> {
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(start) = rest.find("{{") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after
            .find("}}")
            .ok_or_else(|| format!("unclosed `{{{{` in `{text}`"))?;
        let path = after[..end].trim();
        let value = attr_lookup(attrs, path).ok_or_else(|| format!("unknown attribute `{path}`"))?;
        let s = value
            .scalar_text()
            .ok_or_else(|| format!("attribute `{path}` is a map, not a value"))?;
        out.push_str(&s);
        rest = &after[end + 2..];
    }
    out.push_str(rest);
    Ok(out)
}

/// Parses `64m`, `1g`, `4k` or a plain byte count (binary multiples).
pub fn parse_size(s: &str) -> Result<u64, String> {
    let t = s.trim().to_ascii_lowercase();
    let t = t.strip_suffix('b').filter(|x| !x.is_empty()).unwrap_or(&t);
    let t = t.strip_suffix('i').unwrap_or(t);
    let (num, mult) = match t.chars().last() {
        Some('k') => (&t[..t.len() - 1], 1u64 << 10),
        Some('m') => (&t[..t.len() - 1], 1 << 20),
        Some('g') => (&t[..t.len() - 1], 1 << 30),
        Some('t') => (&t[..t.len() - 1], 1 << 40),
        _ => (t, 1),
    };
    let n: u64 = num.trim().parse().map_err(|_| format!("invalid size `{s}`"))?;
    n.checked_mul(mult).ok_or_else(|| format!("size `{s}` overflows"))
}

fn parse_flag(s: &str) -> Result<bool, String> {
    match s.trim().to_ascii_lowercase().as_str() {
        "1" | "true" | "yes" | "on" => Ok(true),
        "0" | "false" | "no" | "off" | "" => Ok(false),
        other => Err(format!("invalid flag `{other}`")),
    }
}

fn parse_u64(s: &str, what: &str) -> Result<u64, String> {
    s.trim().parse().map_err(|_| format!("{what} `{s}` is not a non-negative integer"))
}

impl RunnerTemplate {
    pub fn render(&self, attrs: &AttributeMap) -> Result<Workload, String> {
        let t = |s: &str| render_template(s, attrs);
        let opt = |s: &Option<String>| -> Result<Option<String>, String> { s.as_deref().map(t).transpose() };
        match self {
            RunnerTemplate::SeqWrite {
                file,
                size,
                block_size,
                refill_buffers,
                fsync,
                interval_ms,
                min_runtime_secs,
                bandwidth_metric,
                cpu_metric,
            } => {
                let w = SeqWrite {
                    file: opt(file)?.unwrap_or_else(|| "data/seqwrite.dat".into()),
                    size_bytes: parse_size(&t(size)?)?,
                    block_size: parse_size(&t(block_size)?)?,
                    refill_buffers: opt(refill_buffers)?.map_or(Ok(false), |s| parse_flag(&s))?,
                    fsync: opt(fsync)?.map_or(Ok(true), |s| parse_flag(&s))?,
                    interval_ms: opt(interval_ms)?.map_or(Ok(500), |s| parse_u64(&s, "interval_ms"))?,
                    min_runtime_secs: opt(min_runtime_secs)?.map_or(Ok(0), |s| parse_u64(&s, "min_runtime_secs"))?,
                    bandwidth_metric: t(bandwidth_metric)?,
                    cpu_metric: opt(cpu_metric)?.filter(|s| !s.is_empty()),
                };
                w.validate().map_err(|e| e.to_string())?;
                Ok(Workload::SeqWrite(w))
            }
            RunnerTemplate::Command { command } => Ok(Workload::Command(CommandWorkload { command: t(command)? })),
        }
    }
}

fn provider_failure(index: usize, e: ProviderError) -> ProvisioningError {
    match e {
        ProviderError::ConnectionLost { .. } => ProvisioningError::ConnectionLost(e.to_string()),
        other => ProvisioningError::StepFailed {
            index,
            detail: other.to_string(),
        },
    }
}

/// Applies resolved recipes to `handle`, stopping at the first failure.
pub fn apply(
    driver: &mut dyn Driver,
    handle: &HandleId,
    recipes: &[ResolvedRecipe],
    ctx: &ApplyContext,
    now: Instant,
) -> ProvisionReport {
    let mut report = ProvisionReport::default();
    let mut index = 0;
    for resolved in recipes {
        let mut attrs = resolved.attributes.clone();
        attrs.insert("cwb".into(), ctx.builtins());
        let recipe_ref = resolved.recipe.reference().to_string();
        for step in &resolved.recipe.steps {
            let (description, result) = apply_step(driver, handle, step, &attrs, ctx, now);
            let outcome = match &result {
                Ok(true) => StepOutcome::Changed,
                Ok(false) => StepOutcome::Skipped,
                Err(e) => StepOutcome::Failed(e.to_string()),
            };
            report.steps.push(StepReport {
                recipe: recipe_ref.clone(),
                index,
                kind: step.kind().to_owned(),
                description,
                outcome,
            });
            if let Err(e) = result {
                let e = match e {
                    StepError::Provider(p) => provider_failure(index, p),
                    StepError::Other(detail) => ProvisioningError::StepFailed { index, detail },
                };
                report.fail(e);
                return report;
            }
            index += 1;
        }
    }
    report
}

enum StepError {
    Provider(ProviderError),
    Other(String),
}

impl fmt::Display for StepError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StepError::Provider(e) => e.fmt(f),
            StepError::Other(s) => f.write_str(s),
        }
    }
}

impl From<ProviderError> for StepError {
    fn from(e: ProviderError) -> Self {
        StepError::Provider(e)
    }
}

impl From<String> for StepError {
    fn from(e: String) -> Self {
        StepError::Other(e)
    }
}

/// Returns a description and whether the step changed anything.
fn apply_step(
    driver: &mut dyn Driver,
    handle: &HandleId,
    step: &Step,
    attrs: &AttributeMap,
    ctx: &ApplyContext,
    now: Instant,
) -> (String, Result<bool, StepError>) {
    match step {
        Step::InstallPackage { package } => {
            let desc = format!("package {package}");
            let r = (|| {
                let package = render_template(package, attrs)?;
                let current = driver.read_file(handle, PACKAGE_MANIFEST)?.unwrap_or_default();
                let current = String::from_utf8_lossy(&current).into_owned();
                if current.lines().any(|l| l == package) {
                    return Ok(false);
                }
                let mut lines: Vec<&str> = current.lines().collect();
                lines.push(&package);
                lines.sort_unstable();
                let mut content = lines.join("\n");
                content.push('\n');
                let rep = driver.sync(handle, &[Payload::new(PACKAGE_MANIFEST, content)], now)?;
                Ok(!rep.is_noop())
            })();
            (desc, r)
        }
        Step::WriteFile {
            path,
            content,
            executable,
        } => {
            let desc = format!("file {path}");
            let r = (|| {
                let path = render_template(path, attrs)?;
                let content = render_template(content, attrs)?;
                let mut p = Payload::new(path, content);
                p.executable = *executable;
                Ok(!driver.sync(handle, &[p], now)?.is_noop())
            })();
            (desc, r)
        }
        Step::RenderRunner { workload } => {
            let desc = format!("runner {RUNNER_PATH}");
            let r = (|| {
                let workload = workload.render(attrs)?;
                let files = [
                    Payload::new(
                        CONFIG_PATH,
                        serde_json::to_vec_pretty(&ctx.agent).expect("config serializes"),
                    ),
                    Payload::new(
                        WORKLOAD_PATH,
                        serde_json::to_vec_pretty(&workload).expect("workload serializes"),
                    ),
                    Payload::new(RUNNER_PATH, RUNNER_SCRIPT).executable(),
                ];
                Ok(!driver.sync(handle, &files, now)?.is_noop())
            })();
            (desc, r)
        }
        Step::Shell { command, guard } => {
            let desc = format!("shell `{command}` unless `{guard}`");
            let r = (|| {
                let command = render_template(command, attrs)?;
                let guard = render_template(guard, attrs)?;
                if driver.exec(handle, &guard, ExecMode::Blocking, now)?.success() {
                    return Ok(false);
                }
                let out = driver.exec(handle, &command, ExecMode::Blocking, now)?;
                if !out.success() {
                    return Err(StepError::Other(format!(
                        "`{command}` exited with {:?}: {}",
                        out.exit_code,
                        out.stderr.trim()
                    )));
                }
                Ok(true)
            })();
            (desc, r)
        }
    }
}

/// Recipe documents as stored and served by the API.
pub fn recipe_to_json(recipe: &Recipe) -> Value {
    serde_json::to_value(recipe).expect("recipes serialize")
}
