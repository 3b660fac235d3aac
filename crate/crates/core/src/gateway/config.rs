//! Server configuration: a TOML file with `CWB_*` environment overrides.

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::providers::FaultPlan;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClockMode {
    #[default]
    Real,
    /// Starts at the simulation epoch and runs `time_scale` times faster
    /// than the wall clock.
    Simulated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub bind: SocketAddr,
    /// URL agents use to reach the server. Defaults to `http://{bind}`.
    pub public_url: Option<String>,
    /// Bearer token for `/api`. Without one the API is open.
    pub operator_token: Option<String>,
    /// Snapshot file. Without one nothing is persisted.
    pub state_path: Option<PathBuf>,
    pub max_preparing: usize,
    pub max_postprocessing: usize,
    pub default_timeout_minutes: u32,
    pub default_release_grace_minutes: u32,
    pub clock: ClockMode,
    pub time_scale: f64,
    /// Registers the simulated driver.
    pub simulated: bool,
    /// Registers the local driver with sandboxes under this directory.
    pub local_root: Option<PathBuf>,
    /// Command timeout of the local driver, in seconds.
    pub local_command_timeout_secs: u64,
    /// Synced into every VM as the agent. Defaults to the running binary.
    pub agent_binary: Option<PathBuf>,
    pub fault_plan: FaultPlan,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            bind: "127.0.0.1:8080".parse().expect("literal"),
            public_url: None,
            operator_token: None,
            state_path: None,
            max_preparing: 4,
            max_postprocessing: 4,
            default_timeout_minutes: 360,
            default_release_grace_minutes: 30,
            clock: ClockMode::Real,
            time_scale: 1.0,
            simulated: true,
            local_root: None,
            local_command_timeout_secs: 600,
            agent_binary: None,
            fault_plan: FaultPlan::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BadConfig {
    pub line: Option<usize>,
    pub field: Option<String>,
    pub message: String,
}

impl fmt::Display for BadConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("bad config")?;
        if let Some(l) = self.line {
            write!(f, " at line {l}")?;
        }
        if let Some(k) = &self.field {
            write!(f, " (field `{k}`)")?;
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for BadConfig {}

fn bad(field: &str, message: impl Into<String>) -> BadConfig {
    BadConfig {
        line: None,
        field: Some(field.to_owned()),
        message: message.into(),
    }
}

/// Key on the line holding byte `offset`, if the line is `key = value`.
fn key_at(text: &str, offset: usize) -> (usize, Option<String>) {
    let line = text[..offset.min(text.len())].matches('\n').count() + 1;
    let line_text = text.lines().nth(line - 1).unwrap_or("");
    let field = line_text
        .split_once('=')
        .map(|(k, _)| k.trim().trim_matches('"').to_owned())
        .filter(|k| !k.is_empty());
    (line, field)
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_owned())
}

impl ServerConfig {
    pub fn from_toml(text: &str) -> Result<Self, BadConfig> {
        let cfg: ServerConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_owned();
            let (line, field) = match e.span() {
                Some(span) => {
                    let (line, key) = key_at(text, span.start);
                    (Some(line), unknown_field(&message).or(key))
                }
                None => (None, unknown_field(&message)),
            };
            BadConfig { line, field, message }
        })?;
        cfg.validate().map_err(|mut e| {
            if let Some(field) = &e.field {
                let leaf = field.rsplit('.').next().unwrap_or(field);
                e.line = text
                    .lines()
                    .position(|l| l.split_once('=').is_some_and(|(k, _)| k.trim() == leaf))
                    .map(|i| i + 1);
            }
            e
        })?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults when `None`) and applies the
    /// environment overrides.
    pub fn load(path: Option<&Path>) -> Result<Self, BadConfig> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| BadConfig {
                    line: None,
                    field: None,
                    message: format!("{}: {e}", p.display()),
                })?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        cfg.apply_env(|k| std::env::var(k).ok())?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies `CWB_<FIELD>` overrides from `get`.
    pub fn apply_env(&mut self, get: impl Fn(&str) -> Option<String>) -> Result<(), BadConfig> {
        fn parse<T: std::str::FromStr>(var: &str, v: &str) -> Result<T, BadConfig>
        where
            T::Err: fmt::Display,
        {
            v.parse().map_err(|e| bad(var, format!("`{v}`: {e}")))
        }
        if let Some(v) = get("CWB_BIND") {
            self.bind = parse("CWB_BIND", &v)?;
        }
        if let Some(v) = get("CWB_PUBLIC_URL") {
            self.public_url = Some(v);
        }
        if let Some(v) = get("CWB_OPERATOR_TOKEN") {
            self.operator_token = Some(v);
        }
        if let Some(v) = get("CWB_STATE_PATH") {
            self.state_path = Some(v.into());
        }
        if let Some(v) = get("CWB_MAX_PREPARING") {
            self.max_preparing = parse("CWB_MAX_PREPARING", &v)?;
        }
        if let Some(v) = get("CWB_MAX_POSTPROCESSING") {
            self.max_postprocessing = parse("CWB_MAX_POSTPROCESSING", &v)?;
        }
        if let Some(v) = get("CWB_DEFAULT_TIMEOUT_MINUTES") {
            self.default_timeout_minutes = parse("CWB_DEFAULT_TIMEOUT_MINUTES", &v)?;
        }
        if let Some(v) = get("CWB_DEFAULT_RELEASE_GRACE_MINUTES") {
            self.default_release_grace_minutes = parse("CWB_DEFAULT_RELEASE_GRACE_MINUTES", &v)?;
        }
        if let Some(v) = get("CWB_CLOCK") {
            self.clock = match v.as_str() {
                "real" => ClockMode::Real,
                "simulated" => ClockMode::Simulated,
                other => return Err(bad("CWB_CLOCK", format!("`{other}`: expected real or simulated"))),
            };
        }
        if let Some(v) = get("CWB_TIME_SCALE") {
            self.time_scale = parse("CWB_TIME_SCALE", &v)?;
        }
        if let Some(v) = get("CWB_LOCAL_ROOT") {
            self.local_root = Some(v.into());
        }
        if let Some(v) = get("CWB_AGENT_BINARY") {
            self.agent_binary = Some(v.into());
        }
        if let Some(v) = get("CWB_FAULT_SEED") {
            self.fault_plan.seed = parse("CWB_FAULT_SEED", &v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), BadConfig> {
        if self.max_preparing == 0 {
            return Err(bad("max_preparing", "must be at least 1"));
        }
        if self.max_postprocessing == 0 {
            return Err(bad("max_postprocessing", "must be at least 1"));
        }
        if self.default_timeout_minutes == 0 {
            return Err(bad("default_timeout_minutes", "must be at least 1"));
        }
        if !(self.time_scale.is_finite() && self.time_scale > 0.0) {
            return Err(bad("time_scale", "must be a positive number"));
        }
        if !self.simulated && self.local_root.is_none() {
            return Err(bad("simulated", "no provider enabled; set simulated = true or local_root"));
        }
        self.fault_plan.validate().map_err(|m| bad("fault_plan", m))
    }

    pub fn public_url(&self) -> String {
        self.public_url.clone().unwrap_or_else(|| format!("http://{}", self.bind))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_overrides() {
        let cfg = ServerConfig::from_toml(
            "max_preparing = 2\nclock = \"simulated\"\n[fault_plan]\nseed = 7\nrun_failure_prob = 0.5\n",
        )
        .unwrap();
        assert_eq!(cfg.max_preparing, 2);
        assert_eq!(cfg.clock, ClockMode::Simulated);
        assert_eq!(cfg.fault_plan.seed, 7);
        assert_eq!(cfg.default_release_grace_minutes, 30);

        let mut cfg = cfg;
        cfg.apply_env(|k| (k == "CWB_MAX_PREPARING").then(|| "9".to_owned())).unwrap();
        assert_eq!(cfg.max_preparing, 9);
        let err = cfg
            .apply_env(|k| (k == "CWB_CLOCK").then(|| "lunar".to_owned()))
            .unwrap_err();
        assert_eq!(err.field.as_deref(), Some("CWB_CLOCK"));
    }

    #[test]
    fn type_errors_name_line_and_field() {
        let err = ServerConfig::from_toml("bind = \"127.0.0.1:9000\"\nmax_preparing = \"three\"\n").unwrap_err();
        assert_eq!(err.line, Some(2));
        assert_eq!(err.field.as_deref(), Some("max_preparing"));
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = ServerConfig::from_toml("\nmax_prep = 3\n").unwrap_err();
        assert_eq!(err.line, Some(2));
        assert_eq!(err.field.as_deref(), Some("max_prep"));
    }

    #[test]
    fn semantic_errors_name_line() {
        let err = ServerConfig::from_toml("simulated = true\nmax_postprocessing = 0\n").unwrap_err();
        assert_eq!((err.line, err.field.as_deref()), (Some(2), Some("max_postprocessing")));
        let err = ServerConfig::from_toml("[fault_plan]\nhang_prob = 2.0\n").unwrap_err();
        assert_eq!(err.field.as_deref(), Some("fault_plan"));
    }
}
