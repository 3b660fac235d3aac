//! Benchmark definitions, executions and the JSON definition document.
//!
//! A definition document looks like
//!
//! ```json
//! {"name": "fio seq write", "timeout_minutes": 60, "release_grace_minutes": 30,
//!  "schedule": "0 */6 * * *",
//!  "vms": [{"role": "driver", "provider": "simulated", "region": "eu-west-1",
//!           "instance_type": "m1.small", "image": "ubuntu-14.04",
//!           "extra_resources": {"ebs_gb": 20}}],
//!  "provisioning": [{"role": "driver", "recipe": "fio-benchmark@0.3.0",
//!                    "attributes": {"fio": {"config": {"size": "1g"}}}}],
//!  "metrics": [{"name": "cpu_model", "scale": "nominal", "unit": null}]}
//! ```
//!
//! [`validate_definition`] turns it into a [`BenchmarkDefinition`], collecting
//! every violation instead of stopping at the first one.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use chrono::Duration;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Number, Value};
use thiserror::Error;

use crate::clock::Instant;
use crate::providers::ResourceHandle;
use crate::scheduler::{parse_cron, CronExpression};
use crate::statemachine::{self, ExecutionEvent, ExecutionState, Replayed, TransitionError};

macro_rules! string_id {
    ($name:ident) => {
        #[derive(Debug, Clone, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                Self(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                Self(s)
            }
        }
    };
}

string_id!(BenchmarkId);
string_id!(ExecutionId);

/// Generates creation-time ordered identifiers: `<prefix>-<millis>-<seq>`,
/// zero padded so that lexicographic order equals creation order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IdGenerator {
    last_millis: i64,
    seq: u32,
}

impl IdGenerator {
    pub fn next(&mut self, prefix: &str, now: Instant) -> String {
        let millis = now.timestamp_millis().max(self.last_millis);
        if millis == self.last_millis {
            self.seq += 1;
        } else {
            self.last_millis = millis;
            self.seq = 0;
        }
        format!("{prefix}-{millis:013}-{:06}", self.seq)
    }
}

// ---------------------------------------------------------------------------
// Attributes

/// Leaf or nested value of an attribute map. Lists are not allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum AttrValue {
    Bool(bool),
    Number(Number),
    String(String),
    Map(AttributeMap),
}

pub type AttributeMap = BTreeMap<String, AttrValue>;

impl AttrValue {
    pub fn as_map(&self) -> Option<&AttributeMap> {
        match self {
            AttrValue::Map(m) => Some(m),
            _ => None,
        }
    }

    /// Scalar rendered as text; `None` for maps.
    pub fn scalar_text(&self) -> Option<String> {
        match self {
            AttrValue::Bool(b) => Some(b.to_string()),
            AttrValue::Number(n) => Some(n.to_string()),
            AttrValue::String(s) => Some(s.clone()),
            AttrValue::Map(_) => None,
        }
    }

    pub fn to_json(&self) -> Value {
        serde_json::to_value(self).expect("attribute values serialize")
    }
}

impl From<&str> for AttrValue {
    fn from(s: &str) -> Self {
        AttrValue::String(s.to_owned())
    }
}

/// Looks up a dotted path (`fio.config.size`) in an attribute map.
pub fn attr_lookup<'a>(attrs: &'a AttributeMap, path: &str) -> Option<&'a AttrValue> {
    let mut parts = path.split('.');
    let mut cur = attrs.get(parts.next()?)?;
    for p in parts {
        cur = cur.as_map()?.get(p)?;
    }
    Some(cur)
}

fn attr_from_json(v: &Value, path: &str, errs: &mut Vec<DefinitionError>) -> Option<AttrValue> {
    match v {
        Value::Bool(b) => Some(AttrValue::Bool(*b)),
        Value::Number(n) => Some(AttrValue::Number(n.clone())),
        Value::String(s) => Some(AttrValue::String(s.clone())),
        Value::Object(o) => {
            let mut m = AttributeMap::new();
            for (k, v) in o {
                let child = format!("{path}.{k}");
                if k.is_empty() {
                    errs.push(DefinitionError::InvalidValue {
                        path: child,
                        reason: "attribute keys must be non-empty".into(),
                    });
                    continue;
                }
                if let Some(val) = attr_from_json(v, &child, errs) {
                    m.insert(k.clone(), val);
                }
            }
            Some(AttrValue::Map(m))
        }
        Value::Array(_) | Value::Null => {
            errs.push(DefinitionError::InvalidValue {
                path: path.to_owned(),
                reason: "attribute values must be strings, numbers, booleans or maps".into(),
            });
            None
        }
    }
}

// ---------------------------------------------------------------------------
// Definition types

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleType {
    Nominal,
    Ordinal,
    Interval,
    Ratio,
}

impl ScaleType {
    pub fn is_numeric(self) -> bool {
        !matches!(self, ScaleType::Nominal)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ScaleType::Nominal => "nominal",
            ScaleType::Ordinal => "ordinal",
            ScaleType::Interval => "interval",
            ScaleType::Ratio => "ratio",
        }
    }
}

impl std::str::FromStr for ScaleType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "nominal" => Ok(Self::Nominal),
            "ordinal" => Ok(Self::Ordinal),
            "interval" => Ok(Self::Interval),
            "ratio" => Ok(Self::Ratio),
            other => Err(format!("unknown scale `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VmSpec {
    pub role: String,
    pub provider: String,
    pub region: String,
    pub instance_type: String,
    pub image: String,
    /// Requests for auxiliary resources, e.g. `{"ebs_gb": 20, "ebs_type": "gp2"}`.
    pub extra_resources: BTreeMap<String, AttrValue>,
}

/// `name@MAJOR.MINOR.PATCH` reference to a registered recipe.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct RecipeRef {
    pub name: String,
    pub version: String,
}

impl RecipeRef {
    pub fn parse(s: &str) -> Result<Self, DefinitionError> {
        let bad = || DefinitionError::BadRecipeRef(s.to_owned());
        let (name, version) = s.split_once('@').ok_or_else(bad)?;
        let name_ok = !name.is_empty()
            && name
                .bytes()
                .all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_' || b == b'.');
        if !name_ok || !is_semver(version) {
            return Err(bad());
        }
        Ok(Self {
            name: name.to_owned(),
            version: version.to_owned(),
        })
    }
}

fn is_semver(v: &str) -> bool {
    let core = v.split(['-', '+']).next().unwrap_or("");
    let rest = &v[core.len()..];
    let parts: Vec<&str> = core.split('.').collect();
    let numeric = |p: &&str| {
        !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit()) && (p.len() == 1 || !p.starts_with('0'))
    };
    parts.len() == 3
        && parts.iter().all(numeric)
        && rest
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'+' | b'.'))
        && rest != "-"
        && rest != "+"
}

impl fmt::Display for RecipeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.name, self.version)
    }
}

impl TryFrom<String> for RecipeRef {
    type Error = DefinitionError;
    fn try_from(s: String) -> Result<Self, Self::Error> {
        Self::parse(&s)
    }
}

impl From<RecipeRef> for String {
    fn from(r: RecipeRef) -> String {
        r.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvisioningBinding {
    pub role: String,
    pub recipe: RecipeRef,
    pub attributes: AttributeMap,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricDefinition {
    pub name: String,
    pub scale: ScaleType,
    pub unit: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkDefinition {
    pub id: BenchmarkId,
    pub name: String,
    pub vms: Vec<VmSpec>,
    pub provisioning: Vec<ProvisioningBinding>,
    pub metric_definitions: Vec<MetricDefinition>,
    pub schedule: Option<CronExpression>,
    pub timeout_minutes: u32,
    pub release_grace_minutes: u32,
    pub active: bool,
}

impl BenchmarkDefinition {
    pub fn timeout(&self) -> Duration {
        Duration::minutes(i64::from(self.timeout_minutes))
    }

    pub fn release_grace(&self) -> Duration {
        Duration::minutes(i64::from(self.release_grace_minutes))
    }

    pub fn metric(&self, name: &str) -> Option<&MetricDefinition> {
        self.metric_definitions.iter().find(|m| m.name == name)
    }

    pub fn roles(&self) -> impl Iterator<Item = &str> {
        self.vms.iter().map(|v| v.role.as_str())
    }

    /// Bindings for `role`, in document order.
    pub fn bindings_for<'a>(&'a self, role: &'a str) -> impl Iterator<Item = &'a ProvisioningBinding> {
        self.provisioning.iter().filter(move |b| b.role == role)
    }

    /// Renders the external definition document (no id).
    pub fn to_document(&self) -> Value {
        let vms: Vec<Value> = self
            .vms
            .iter()
            .map(|vm| {
                serde_json::json!({
                    "role": vm.role,
                    "provider": vm.provider,
                    "region": vm.region,
                    "instance_type": vm.instance_type,
                    "image": vm.image,
                    "extra_resources": vm.extra_resources,
                })
            })
            .collect();
        let provisioning: Vec<Value> = self
            .provisioning
            .iter()
            .map(|b| {
                serde_json::json!({
                    "role": b.role,
                    "recipe": b.recipe.to_string(),
                    "attributes": b.attributes,
                })
            })
            .collect();
        let metrics: Vec<Value> = self
            .metric_definitions
            .iter()
            .map(|m| serde_json::json!({"name": m.name, "scale": m.scale, "unit": m.unit}))
            .collect();
        serde_json::json!({
            "name": self.name,
            "timeout_minutes": self.timeout_minutes,
            "release_grace_minutes": self.release_grace_minutes,
            "schedule": self.schedule.as_ref().map(|s| s.to_string()),
            "active": self.active,
            "vms": vms,
            "provisioning": provisioning,
            "metrics": metrics,
        })
    }
}

// ---------------------------------------------------------------------------
// Validation

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DefinitionError {
    #[error("missing field: {0}")]
    MissingField(String),
    #[error("unknown provider `{0}`")]
    UnknownProvider(String),
    #[error("provisioning references undefined role `{0}`")]
    DanglingRoleReference(String),
    #[error("duplicate metric name `{0}`")]
    DuplicateMetricName(String),
    #[error("bad recipe reference `{0}` (expected name@MAJOR.MINOR.PATCH)")]
    BadRecipeRef(String),
    #[error("duplicate vm role `{0}`")]
    DuplicateRole(String),
    #[error("unknown field `{0}`")]
    UnknownField(String),
    #[error("invalid value at {path}: {reason}")]
    InvalidValue { path: String, reason: String },
    #[error("invalid override path `{0}`")]
    InvalidOverridePath(String),
    #[error("document is not valid JSON: {0}")]
    Parse(String),
}

/// All violations found in one document.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{} violation(s): {}", .0.len(), .0.iter().map(|e| e.to_string()).collect::<Vec<_>>().join("; "))]
pub struct DefinitionErrors(pub Vec<DefinitionError>);

impl DefinitionErrors {
    pub fn contains(&self, e: &DefinitionError) -> bool {
        self.0.contains(e)
    }
}

/// Server-side knowledge needed to validate a document.
#[derive(Debug, Clone)]
pub struct ValidationContext {
    pub providers: BTreeSet<String>,
    pub default_timeout_minutes: u32,
    pub default_release_grace_minutes: u32,
}

impl Default for ValidationContext {
    fn default() -> Self {
        Self {
            providers: ["simulated", "local"].iter().map(|s| s.to_string()).collect(),
            default_timeout_minutes: 360,
            default_release_grace_minutes: 30,
        }
    }
}

impl ValidationContext {
    pub fn with_providers<I, S>(providers: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Self {
            providers: providers.into_iter().map(Into::into).collect(),
            ..Self::default()
        }
    }
}

const TOP_FIELDS: &[&str] = &[
    "name",
    "timeout_minutes",
    "release_grace_minutes",
    "schedule",
    "active",
    "vms",
    "provisioning",
    "metrics",
];
const VM_FIELDS: &[&str] = &["role", "provider", "region", "instance_type", "image", "extra_resources"];
const BINDING_FIELDS: &[&str] = &["role", "recipe", "attributes"];
const METRIC_FIELDS: &[&str] = &["name", "scale", "unit"];

struct Reader<'a> {
    errs: &'a mut Vec<DefinitionError>,
}

impl Reader<'_> {
    fn object<'v>(&mut self, v: &'v Value, path: &str, allowed: &[&str]) -> Option<&'v Map<String, Value>> {
        let Some(obj) = v.as_object() else {
            self.errs.push(DefinitionError::InvalidValue {
                path: path.to_owned(),
                reason: "expected an object".into(),
            });
            return None;
        };
        for k in obj.keys() {
            if !allowed.contains(&k.as_str()) {
                self.errs.push(DefinitionError::UnknownField(join(path, k)));
            }
        }
        Some(obj)
    }

    fn string(&mut self, obj: &Map<String, Value>, path: &str, key: &str, required: bool) -> Option<String> {
        match obj.get(key) {
            None | Some(Value::Null) => {
                if required {
                    self.errs.push(DefinitionError::MissingField(join(path, key)));
                }
                None
            }
            Some(Value::String(s)) if required && s.trim().is_empty() => {
                self.errs.push(DefinitionError::MissingField(join(path, key)));
                None
            }
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => {
                self.errs.push(DefinitionError::InvalidValue {
                    path: join(path, key),
                    reason: "expected a string".into(),
                });
                None
            }
        }
    }

    fn minutes(&mut self, obj: &Map<String, Value>, key: &str, default: u32, min: u32) -> u32 {
        match obj.get(key) {
            None | Some(Value::Null) => default,
            Some(Value::Number(n)) => match n.as_u64().and_then(|v| u32::try_from(v).ok()) {
                Some(v) if v >= min => v,
                _ => {
                    self.errs.push(DefinitionError::InvalidValue {
                        path: key.to_owned(),
                        reason: format!("expected an integer >= {min}"),
                    });
                    default
                }
            },
            Some(_) => {
                self.errs.push(DefinitionError::InvalidValue {
                    path: key.to_owned(),
                    reason: "expected an integer number of minutes".into(),
                });
                default
            }
        }
    }

    fn list<'v>(&mut self, obj: &'v Map<String, Value>, key: &str) -> &'v [Value] {
        match obj.get(key) {
            Some(Value::Array(a)) if !a.is_empty() => a,
            Some(Value::Array(_)) | None | Some(Value::Null) => {
                self.errs
                    .push(DefinitionError::MissingField(format!("{key} non-empty")));
                &[]
            }
            Some(_) => {
                self.errs.push(DefinitionError::InvalidValue {
                    path: key.to_owned(),
                    reason: "expected a list".into(),
                });
                &[]
            }
        }
    }

    fn attr_map(&mut self, obj: &Map<String, Value>, path: &str, key: &str) -> AttributeMap {
        match obj.get(key) {
            None | Some(Value::Null) => AttributeMap::new(),
            Some(v @ Value::Object(_)) => match attr_from_json(v, &join(path, key), self.errs) {
                Some(AttrValue::Map(m)) => m,
                _ => AttributeMap::new(),
            },
            Some(_) => {
                self.errs.push(DefinitionError::InvalidValue {
                    path: join(path, key),
                    reason: "expected an object".into(),
                });
                AttributeMap::new()
            }
        }
    }
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_owned()
    } else {
        format!("{path}.{key}")
    }
}

/// Parses and validates a definition document given as JSON text.
pub fn validate_definition_str(
    text: &str,
    ctx: &ValidationContext,
) -> Result<BenchmarkDefinition, DefinitionErrors> {
    let doc: Value = serde_json::from_str(text)
        .map_err(|e| DefinitionErrors(vec![DefinitionError::Parse(e.to_string())]))?;
    validate_definition(&doc, ctx)
}

/// Validates a definition document. The returned definition has an empty id;
/// the store assigns one on insert.
pub fn validate_definition(
    doc: &Value,
    ctx: &ValidationContext,
) -> Result<BenchmarkDefinition, DefinitionErrors> {
    let mut errs = Vec::new();
    let mut r = Reader { errs: &mut errs };

    let Some(top) = r.object(doc, "", TOP_FIELDS) else {
        return Err(DefinitionErrors(errs));
    };
    let name = r.string(top, "", "name", true).unwrap_or_default();
    let timeout_minutes = r.minutes(top, "timeout_minutes", ctx.default_timeout_minutes, 1);
    let release_grace_minutes =
        r.minutes(top, "release_grace_minutes", ctx.default_release_grace_minutes, 0);
    let schedule = match r.string(top, "", "schedule", false) {
        Some(s) if !s.trim().is_empty() => match parse_cron(&s) {
            Ok(c) => Some(c),
            Err(e) => {
                r.errs.push(DefinitionError::InvalidValue {
                    path: "schedule".into(),
                    reason: e.to_string(),
                });
                None
            }
        },
        _ => None,
    };
    let active = match top.get("active") {
        None | Some(Value::Null) => true,
        Some(Value::Bool(b)) => *b,
        Some(_) => {
            r.errs.push(DefinitionError::InvalidValue {
                path: "active".into(),
                reason: "expected a boolean".into(),
            });
            true
        }
    };

    let mut vms = Vec::new();
    for (i, v) in r.list(top, "vms").iter().enumerate() {
        let path = format!("vms[{i}]");
        let Some(o) = r.object(v, &path, VM_FIELDS) else { continue };
        let role = r.string(o, &path, "role", true);
        let provider = r.string(o, &path, "provider", true);
        let region = r.string(o, &path, "region", false).unwrap_or_default();
        let instance_type = r.string(o, &path, "instance_type", false).unwrap_or_default();
        let image = r.string(o, &path, "image", false).unwrap_or_default();
        let extra = r.attr_map(o, &path, "extra_resources");
        for (k, val) in &extra {
            if val.as_map().is_some() {
                r.errs.push(DefinitionError::InvalidValue {
                    path: format!("{path}.extra_resources.{k}"),
                    reason: "extra resource requests must be scalars".into(),
                });
            }
        }
        if let Some(p) = &provider {
            if !ctx.providers.contains(p) {
                r.errs.push(DefinitionError::UnknownProvider(p.clone()));
            }
        }
        if let (Some(role), Some(provider)) = (role, provider) {
            vms.push(VmSpec {
                role,
                provider,
                region,
                instance_type,
                image,
                extra_resources: extra,
            });
        }
    }

    let mut provisioning = Vec::new();
    for (i, v) in r.list(top, "provisioning").iter().enumerate() {
        let path = format!("provisioning[{i}]");
        let Some(o) = r.object(v, &path, BINDING_FIELDS) else { continue };
        let role = r.string(o, &path, "role", true);
        let recipe = r.string(o, &path, "recipe", true).and_then(|s| match RecipeRef::parse(&s) {
            Ok(rr) => Some(rr),
            Err(e) => {
                r.errs.push(e);
                None
            }
        });
        let attributes = r.attr_map(o, &path, "attributes");
        if let (Some(role), Some(recipe)) = (role, recipe) {
            provisioning.push(ProvisioningBinding {
                role,
                recipe,
                attributes,
            });
        }
    }

    let mut metric_definitions = Vec::new();
    for (i, v) in r.list(top, "metrics").iter().enumerate() {
        let path = format!("metrics[{i}]");
        let Some(o) = r.object(v, &path, METRIC_FIELDS) else { continue };
        let name = r.string(o, &path, "name", true);
        let scale = r.string(o, &path, "scale", true).and_then(|s| match s.parse::<ScaleType>() {
            Ok(sc) => Some(sc),
            Err(reason) => {
                r.errs.push(DefinitionError::InvalidValue {
                    path: format!("{path}.scale"),
                    reason,
                });
                None
            }
        });
        let unit = r.string(o, &path, "unit", false);
        if let (Some(name), Some(scale)) = (name, scale) {
            metric_definitions.push(MetricDefinition { name, scale, unit });
        }
    }

    // Cross-field invariants.
    let mut roles = BTreeSet::new();
    for vm in &vms {
        if !roles.insert(vm.role.as_str()) {
            errs.push(DefinitionError::DuplicateRole(vm.role.clone()));
        }
    }
    let mut dangling = BTreeSet::new();
    for b in &provisioning {
        if !roles.contains(b.role.as_str()) && dangling.insert(b.role.clone()) {
            errs.push(DefinitionError::DanglingRoleReference(b.role.clone()));
        }
    }
    let mut names = BTreeSet::new();
    for m in &metric_definitions {
        if !names.insert(m.name.as_str()) {
            errs.push(DefinitionError::DuplicateMetricName(m.name.clone()));
        }
    }

    if !errs.is_empty() {
        return Err(DefinitionErrors(errs));
    }
    Ok(BenchmarkDefinition {
        id: BenchmarkId::default(),
        name,
        vms,
        provisioning,
        metric_definitions,
        schedule,
        timeout_minutes,
        release_grace_minutes,
        active,
    })
}

// ---------------------------------------------------------------------------
// Cloning

/// Override set for [`clone_with_overrides`]: document paths such as
/// `vms[0].instance_type` or `provisioning[0].attributes.fio.config.size`
/// mapped to their new values.
pub type Overrides = BTreeMap<String, Value>;

#[derive(Debug, Clone, PartialEq, Eq)]
enum Segment {
    Key(String),
    Index(usize),
}

fn parse_path(path: &str) -> Option<Vec<Segment>> {
    let mut out = Vec::new();
    for part in path.split('.') {
        let (key, mut rest) = match part.find('[') {
            Some(i) => (&part[..i], &part[i..]),
            None => (part, ""),
        };
        if key.is_empty() {
            return None;
        }
        out.push(Segment::Key(key.to_owned()));
        while !rest.is_empty() {
            let close = rest.find(']')?;
            let idx: usize = rest.get(1..close)?.parse().ok()?;
            out.push(Segment::Index(idx));
            rest = &rest[close + 1..];
            if !rest.is_empty() && !rest.starts_with('[') {
                return None;
            }
        }
    }
    Some(out)
}

fn set_path(doc: &mut Value, path: &str, value: Value) -> Result<(), DefinitionError> {
    let bad = || DefinitionError::InvalidOverridePath(path.to_owned());
    let segs = parse_path(path).ok_or_else(bad)?;
    let mut cur = doc;
    // Inside free-form maps new keys may be introduced.
    let mut free_form = false;
    for (i, seg) in segs.iter().enumerate() {
        let last = i + 1 == segs.len();
        match seg {
            Segment::Key(k) => {
                let obj = cur.as_object_mut().ok_or_else(bad)?;
                if !obj.contains_key(k) {
                    if !free_form {
                        return Err(bad());
                    }
                    let filler = if last { Value::Null } else { Value::Object(Map::new()) };
                    obj.insert(k.clone(), filler);
                }
                if i == 0 && k == "id" {
                    return Err(bad());
                }
                cur = obj.get_mut(k).expect("just checked");
                if k == "attributes" || k == "extra_resources" {
                    free_form = true;
                }
            }
            Segment::Index(idx) => {
                let arr = cur.as_array_mut().ok_or_else(bad)?;
                cur = arr.get_mut(*idx).ok_or_else(bad)?;
            }
        }
    }
    *cur = value;
    Ok(())
}

/// Copies `base` with the given overrides applied. The copy gets `fresh_id`;
/// if its name equals the base name, `" (copy)"` is appended.
pub fn clone_with_overrides(
    base: &BenchmarkDefinition,
    overrides: &Overrides,
    ctx: &ValidationContext,
    fresh_id: BenchmarkId,
) -> Result<BenchmarkDefinition, DefinitionErrors> {
    let mut doc = base.to_document();
    let mut errs = Vec::new();
    for (path, value) in overrides {
        if let Err(e) = set_path(&mut doc, path, value.clone()) {
            errs.push(e);
        }
    }
    if !errs.is_empty() {
        return Err(DefinitionErrors(errs));
    }
    let mut def = validate_definition(&doc, ctx)?;
    if def.name == base.name {
        def.name = format!("{} (copy)", base.name);
    }
    def.id = fresh_id;
    Ok(def)
}

// ---------------------------------------------------------------------------
// Executions

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TriggerCause {
    Manual,
    Scheduled,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoggedEvent {
    pub at: Instant,
    pub event: ExecutionEvent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Execution {
    pub id: ExecutionId,
    pub benchmark_id: BenchmarkId,
    pub created_at: Instant,
    pub deadline_at: Instant,
    pub trigger_cause: TriggerCause,
    pub state: ExecutionState,
    pub event_log: Vec<LoggedEvent>,
    pub resources: Vec<ResourceHandle>,
    /// Append-only log, one entry per line.
    pub log: Vec<String>,
    pub dev_mode: bool,
}

impl Execution {
    /// New execution with its `created` event applied.
    pub fn create(
        id: ExecutionId,
        benchmark: &BenchmarkDefinition,
        cause: TriggerCause,
        now: Instant,
    ) -> Self {
        let mut e = Self {
            id,
            benchmark_id: benchmark.id.clone(),
            created_at: now,
            deadline_at: now + benchmark.timeout(),
            trigger_cause: cause,
            state: ExecutionState::INITIAL,
            event_log: vec![LoggedEvent {
                at: now,
                event: ExecutionEvent::Created,
            }],
            resources: Vec::new(),
            log: Vec::new(),
            dev_mode: false,
        };
        e.append_log(now, &format!("execution created ({cause:?} trigger)").to_lowercase());
        e
    }

    /// Applies `event` at `at`; the log only grows on success.
    pub fn apply(&mut self, event: ExecutionEvent, at: Instant) -> Result<ExecutionState, TransitionError> {
        let next = statemachine::apply_event(self.state, event, self.dev_mode)?;
        match event {
            ExecutionEvent::DevModeEntered => self.dev_mode = true,
            ExecutionEvent::DevModeExited => self.dev_mode = false,
            _ => {}
        }
        self.event_log.push(LoggedEvent { at, event });
        let prev = self.state;
        self.state = next;
        if prev != next {
            self.append_log(at, &format!("{event}: {prev} -> {next}"));
        } else {
            self.append_log(at, &format!("{event}"));
        }
        Ok(next)
    }

    pub fn events(&self) -> impl Iterator<Item = ExecutionEvent> + '_ {
        self.event_log.iter().map(|e| e.event)
    }

    pub fn replayed(&self) -> Result<Replayed, TransitionError> {
        statemachine::replay(self.events())
    }

    pub fn displayed_status(&self) -> String {
        statemachine::displayed_status(self.events()).unwrap_or_else(|_| self.state.display_name())
    }

    pub fn has_event(&self, event: ExecutionEvent) -> bool {
        self.event_log.iter().any(|e| e.event == event)
    }

    /// Instant at which the current failure state was entered.
    pub fn failure_entered_at(&self) -> Option<Instant> {
        if !self.state.is_failure() {
            return None;
        }
        let mut r = Replayed::start();
        let mut entered = None;
        for le in self.event_log.iter().skip(1) {
            let before = r.state;
            if r.step(le.event).is_err() {
                return None;
            }
            if r.state.is_failure() && before != r.state {
                entered = Some(le.at);
            }
        }
        entered
    }

    pub fn append_log(&mut self, at: Instant, text: &str) {
        let stamp = at.format("%Y-%m-%dT%H:%M:%S%.3fZ");
        for line in text.lines() {
            self.log.push(format!("[{stamp}] {line}"));
        }
        if text.is_empty() {
            self.log.push(format!("[{stamp}]"));
        }
    }

    pub fn log_text(&self) -> String {
        let mut s = self.log.join("\n");
        if !s.is_empty() {
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::Clock;
    use serde_json::json;

    pub(crate) fn case_study_doc() -> Value {
        json!({
            "name": "fio sequential write",
            "timeout_minutes": 60,
            "release_grace_minutes": 30,
            "schedule": null,
            "vms": [{
                "role": "driver", "provider": "simulated", "region": "eu-west-1",
                "instance_type": "m1.small", "image": "ami-896c96fe",
                "extra_resources": {"ebs_gb": 20}
            }],
            "provisioning": [{
                "role": "driver", "recipe": "fio-benchmark@0.3.0",
                "attributes": {"fio": {"metric_definition_id": "seq_write_bandwidth_kbps",
                                       "config": {"size": "1g", "refill_buffers": "1"}}}
            }],
            "metrics": [
                {"name": "cpu_model", "scale": "nominal", "unit": null},
                {"name": "seq_write_bandwidth_kbps", "scale": "ratio", "unit": "KB/s"}
            ]
        })
    }

    #[test]
    fn case_study_is_valid() {
        let def = validate_definition(&case_study_doc(), &ValidationContext::default()).unwrap();
        assert_eq!(def.vms.len(), 1);
        assert_eq!(def.provisioning[0].recipe.to_string(), "fio-benchmark@0.3.0");
        assert_eq!(def.metric("cpu_model").unwrap().scale, ScaleType::Nominal);
        assert_eq!(def.timeout_minutes, 60);
    }

    #[test]
    fn empty_vms_is_missing_field() {
        let mut doc = case_study_doc();
        doc["vms"] = json!([]);
        let errs = validate_definition(&doc, &ValidationContext::default()).unwrap_err();
        assert!(errs.contains(&DefinitionError::MissingField("vms non-empty".into())));
    }

    #[test]
    fn dangling_role() {
        let mut doc = case_study_doc();
        doc["provisioning"][0]["role"] = json!("db");
        let errs = validate_definition(&doc, &ValidationContext::default()).unwrap_err();
        assert_eq!(errs.0, vec![DefinitionError::DanglingRoleReference("db".into())]);
    }

    #[test]
    fn other_violations_are_collected() {
        let mut doc = case_study_doc();
        doc["vms"][0]["provider"] = json!("ec2");
        doc["provisioning"][0]["recipe"] = json!("fio-benchmark");
        doc["metrics"][1]["name"] = json!("cpu_model");
        let errs = validate_definition(&doc, &ValidationContext::default()).unwrap_err();
        assert!(errs.contains(&DefinitionError::UnknownProvider("ec2".into())));
        assert!(errs.contains(&DefinitionError::BadRecipeRef("fio-benchmark".into())));
        assert!(errs.contains(&DefinitionError::DuplicateMetricName("cpu_model".into())));
    }

    #[test]
    fn defaults_apply_when_timeouts_absent() {
        let mut doc = case_study_doc();
        doc.as_object_mut().unwrap().remove("timeout_minutes");
        doc.as_object_mut().unwrap().remove("release_grace_minutes");
        let def = validate_definition(&doc, &ValidationContext::default()).unwrap();
        assert_eq!(def.timeout_minutes, 360);
        assert_eq!(def.release_grace_minutes, 30);
    }

    #[test]
    fn zero_timeout_rejected() {
        let mut doc = case_study_doc();
        doc["timeout_minutes"] = json!(0);
        assert!(validate_definition(&doc, &ValidationContext::default()).is_err());
    }

    #[test]
    fn lists_in_attributes_rejected() {
        let mut doc = case_study_doc();
        doc["provisioning"][0]["attributes"]["fio"]["sizes"] = json!(["1g", "4g"]);
        let errs = validate_definition(&doc, &ValidationContext::default()).unwrap_err();
        assert!(matches!(errs.0[0], DefinitionError::InvalidValue { .. }));
    }

    #[test]
    fn recipe_refs() {
        assert!(RecipeRef::parse("fio-benchmark@0.3.0").is_ok());
        assert!(RecipeRef::parse("x@1.2.3-rc.1").is_ok());
        assert!(RecipeRef::parse("x@1.2").is_err());
        assert!(RecipeRef::parse("@1.2.3").is_err());
        assert!(RecipeRef::parse("x@01.2.3").is_err());
    }

    #[test]
    fn clone_empty_overrides_only_renames() {
        let ctx = ValidationContext::default();
        let mut base = validate_definition(&case_study_doc(), &ctx).unwrap();
        base.id = "b-1".into();
        let copy = clone_with_overrides(&base, &Overrides::new(), &ctx, "b-2".into()).unwrap();
        assert_eq!(copy.name, "fio sequential write (copy)");
        assert_eq!(copy.id.as_str(), "b-2");
        let mut normalized = copy.clone();
        normalized.id = base.id.clone();
        normalized.name = base.name.clone();
        assert_eq!(normalized, base);
    }

    #[test]
    fn clone_rejects_undeclared_paths() {
        let ctx = ValidationContext::default();
        let base = validate_definition(&case_study_doc(), &ctx).unwrap();
        for path in ["vms[3].instance_type", "vms[0].flavor", "id", "nonsense[", "vms.0"] {
            let mut o = Overrides::new();
            o.insert(path.into(), json!("x"));
            let err = clone_with_overrides(&base, &o, &ctx, "b".into()).unwrap_err();
            assert_eq!(err.0, vec![DefinitionError::InvalidOverridePath(path.into())], "{path}");
        }
    }

    #[test]
    fn clone_result_must_validate() {
        let ctx = ValidationContext::default();
        let base = validate_definition(&case_study_doc(), &ctx).unwrap();
        let mut o = Overrides::new();
        o.insert("vms[0].provider".into(), json!("nowhere"));
        let err = clone_with_overrides(&base, &o, &ctx, "b".into()).unwrap_err();
        assert!(err.contains(&DefinitionError::UnknownProvider("nowhere".into())));
    }

    #[test]
    fn ids_sort_by_creation() {
        let mut g = IdGenerator::default();
        let t = crate::clock::SimClock::at_epoch().now();
        let a = g.next("e", t);
        let b = g.next("e", t);
        let c = g.next("e", t + Duration::milliseconds(1));
        assert!(a < b && b < c);
    }

    #[test]
    fn execution_deadline_and_log() {
        let ctx = ValidationContext::default();
        let def = validate_definition(&case_study_doc(), &ctx).unwrap();
        let now = crate::clock::SimClock::at_epoch().now();
        let mut e = Execution::create("e-1".into(), &def, TriggerCause::Manual, now);
        assert_eq!(e.deadline_at - e.created_at, Duration::minutes(60));
        assert_eq!(e.state, ExecutionState::WaitingForStartPreparing);
        assert!(e.apply(ExecutionEvent::FinishedRunning, now).is_err());
        assert_eq!(e.event_log.len(), 1);
        e.apply(ExecutionEvent::StartedPreparing, now).unwrap();
        let later = now + Duration::seconds(5);
        e.apply(ExecutionEvent::FailedOnPreparing, later).unwrap();
        assert_eq!(e.failure_entered_at(), Some(later));
        assert_eq!(e.displayed_status(), "FAILED ON PREPARING");
    }

    #[test]
    fn attr_lookup_paths() {
        let def = validate_definition(&case_study_doc(), &ValidationContext::default()).unwrap();
        let attrs = &def.provisioning[0].attributes;
        assert_eq!(attr_lookup(attrs, "fio.config.size"), Some(&AttrValue::from("1g")));
        assert_eq!(attr_lookup(attrs, "fio.config.missing"), None);
        assert_eq!(attr_lookup(attrs, "fio.config.size.deeper"), None);
    }
}
