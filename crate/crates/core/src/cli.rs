//! `cwb` command line: server, API client commands and the on-VM agent.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use crate::agent::{resource_path, run_callback, Agent, AgentConfig, AgentError, HttpTransport, Phase, SPOOL_DIR};
use crate::client::{ApiClient, ClientError};
use crate::gateway::{self, ServerConfig};
use crate::results::SubmittedValue;
use crate::statemachine::ExecutionEvent;

#[derive(Debug, Parser)]
#[command(name = "cwb", version, about = "Cloud benchmark orchestration")]
pub struct Cli {
    /// Server configuration file (TOML).
    #[arg(long, global = true, env = "CWB_CONFIG")]
    pub config: Option<PathBuf>,
    /// Print JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
    /// Server base URL for client commands. Defaults to the configured bind address.
    #[arg(long, global = true, env = "CWB_SERVER")]
    pub server: Option<String>,
    /// Operator token for client commands. Defaults to the configured one.
    #[arg(long, global = true, env = "CWB_TOKEN", hide_env_values = true)]
    pub token: Option<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the server.
    Serve,
    #[command(subcommand)]
    Benchmark(BenchmarkCmd),
    #[command(subcommand)]
    Exec(ExecCmd),
    #[command(subcommand)]
    Stats(StatsCmd),
    #[command(subcommand)]
    Recipes(RecipesCmd),
    /// Read or step the server clock (simulated mode only for `advance`).
    #[command(subcommand)]
    Clock(ClockCmd),
    /// Commands run on a provisioned resource.
    #[command(subcommand)]
    Agent(AgentCmd),
}

#[derive(Debug, Subcommand)]
pub enum BenchmarkCmd {
    /// Register a definition from a JSON file and print its id.
    Create {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
    },
    List,
    Show { id: String },
    /// Copy a definition, overriding fields by path (`vms.0.instance_type=m3.large`).
    Clone {
        id: String,
        #[arg(long = "set", value_name = "PATH=VALUE")]
        set: Vec<String>,
    },
    Activate { id: String },
    Deactivate { id: String },
}

#[derive(Debug, Subcommand)]
pub enum ExecCmd {
    /// Start an execution and print its id.
    Trigger { benchmark: String },
    Show { id: String },
    List {
        #[arg(long)]
        state: Option<String>,
        #[arg(long)]
        benchmark: Option<String>,
        /// RFC 3339 lower bound on creation time.
        #[arg(long)]
        after: Option<String>,
        #[arg(long)]
        before: Option<String>,
    },
    Log {
        id: String,
        /// Line cursor to start after.
        #[arg(long, default_value_t = 0)]
        after: usize,
        /// Keep polling until the execution terminates.
        #[arg(long)]
        follow: bool,
    },
    DevMode { id: String, mode: Toggle },
    Release { id: String },
    Reprovision { id: String },
    /// Observations as CSV.
    Metrics { id: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Toggle {
    On,
    Off,
}

#[derive(Debug, Subcommand)]
pub enum StatsCmd {
    /// Across/within-execution cv, rendered as `A% (L-U%)`.
    Variability { benchmark: String, metric: String },
}

#[derive(Debug, Subcommand)]
pub enum RecipesCmd {
    List,
    Add {
        #[arg(short = 'f', long = "file")]
        file: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum ClockCmd {
    Show,
    Advance { seconds: i64 },
}

#[derive(Debug, Args)]
pub struct AgentRoot {
    /// Resource root holding `cwb/config`.
    #[arg(long, default_value = "/")]
    pub root: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum AgentCmd {
    /// Runner entry point: `run` executes the workload, `postprocess` uploads results.
    Callback {
        #[command(flatten)]
        root: AgentRoot,
        phase: String,
    },
    Notify {
        #[command(flatten)]
        root: AgentRoot,
        event: String,
    },
    Submit {
        #[command(flatten)]
        root: AgentRoot,
        metric: String,
        value: String,
        #[arg(long)]
        offset_ms: Option<u64>,
    },
    FlushSpool {
        #[command(flatten)]
        root: AgentRoot,
    },
}

/// Error printed as one JSON object on stderr.
#[derive(Debug)]
pub struct CliError {
    pub kind: String,
    pub message: String,
    pub details: Option<Value>,
}

impl CliError {
    fn new(kind: &str, message: impl Into<String>) -> Self {
        Self {
            kind: kind.to_owned(),
            message: message.into(),
            details: None,
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        let details = match &e {
            ClientError::Api { details, .. } => details.clone(),
            ClientError::Unreachable { .. } => None,
        };
        Self {
            kind: e.kind().to_owned(),
            message: e.to_string(),
            details,
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        let kind = match e {
            AgentError::Config(_) => "agent_config",
            AgentError::Rejected { .. } => "rejected",
            AgentError::Spooled { .. } => "spooled",
            AgentError::Workload(_) => "workload",
            AgentError::Io(_) => "io",
        };
        Self::new(kind, e.to_string())
    }
}

type CliResult = Result<(), CliError>;

pub fn main_with(cli: Cli) -> ExitCode {
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut body = json!({"error": e.kind, "message": e.message});
            if let Some(d) = e.details {
                body["details"] = d;
            }
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> CliResult {
    match &cli.command {
        Command::Serve => serve(&cli),
        Command::Agent(cmd) => agent(cmd),
        Command::Benchmark(cmd) => benchmark(&cli, &client(&cli)?, cmd),
        Command::Exec(cmd) => exec(&cli, &client(&cli)?, cmd),
        Command::Stats(cmd) => stats(&cli, &client(&cli)?, cmd),
        Command::Recipes(cmd) => recipes(&cli, &client(&cli)?, cmd),
        Command::Clock(cmd) => clock(&cli, &client(&cli)?, cmd),
    }
}

fn load_config(cli: &Cli) -> Result<ServerConfig, CliError> {
    ServerConfig::load(cli.config.as_deref()).map_err(|e| CliError {
        kind: "bad_config".into(),
        message: e.to_string(),
        details: Some(json!({"line": e.line, "field": e.field})),
    })
}

fn client(cli: &Cli) -> Result<ApiClient, CliError> {
    let cfg = load_config(cli)?;
    let base = cli.server.clone().unwrap_or_else(|| cfg.public_url());
    Ok(ApiClient::new(base, cli.token.clone().or(cfg.operator_token))?)
}

fn serve(cli: &Cli) -> CliResult {
    let cfg = load_config(cli)?;
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::new("runtime", e.to_string()))?;
    rt.block_on(gateway::serve(cfg)).map_err(|e| {
        let kind = match &e {
            gateway::GatewayError::PortInUse(_) => "port_in_use",
            gateway::GatewayError::BadConfig(_) => "bad_config",
            gateway::GatewayError::StoreUnavailable(_) => "store_unavailable",
            gateway::GatewayError::Io(_) => "io",
        };
        CliError::new(kind, e.to_string())
    })
}

fn print_json(v: &Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json"));
}

fn str_of<'a>(v: &'a Value, key: &str) -> &'a str {
    v[key].as_str().unwrap_or("-")
}

/// Left-aligned columns separated by two spaces.
fn print_table(header: &[&str], rows: &[Vec<String>]) {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: Vec<&str>| {
        let s: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect();
        println!("{}", s.join("  ").trim_end());
    };
    line(header.to_vec());
    for r in rows {
        line(r.iter().map(String::as_str).collect());
    }
}

fn read_json_file(path: &Path) -> Result<Value, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::new("io", format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::new("parse", format!("{}: {e}", path.display())))
}

fn benchmark(cli: &Cli, c: &ApiClient, cmd: &BenchmarkCmd) -> CliResult {
    match cmd {
        BenchmarkCmd::Create { file } => {
            let b = c.post("/api/benchmarks", &read_json_file(file)?)?;
            if cli.json {
                print_json(&b);
            } else {
                println!("{}", str_of(&b, "id"));
            }
        }
        BenchmarkCmd::List => {
            let list = c.get("/api/benchmarks")?;
            if cli.json {
                print_json(&list);
            } else {
                let rows: Vec<Vec<String>> = list
                    .as_array()
                    .into_iter()
                    .flatten()
                    .map(|b| {
                        vec![
                            str_of(b, "id").to_owned(),
                            str_of(b, "name").to_owned(),
                            b["active"].to_string(),
                            str_of(b, "schedule").to_owned(),
                            b["vms"].as_array().map_or(0, Vec::len).to_string(),
                        ]
                    })
                    .collect();
                print_table(&["ID", "NAME", "ACTIVE", "SCHEDULE", "VMS"], &rows);
            }
        }
        BenchmarkCmd::Show { id } => print_json(&c.get(&format!("/api/benchmarks/{id}"))?),
        BenchmarkCmd::Clone { id, set } => {
            let mut overrides = BTreeMap::new();
            for s in set {
                let (path, raw) = s
                    .split_once('=')
                    .ok_or_else(|| CliError::new("usage", format!("--set expects PATH=VALUE, got `{s}`")))?;
                let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
                overrides.insert(path.to_owned(), value);
            }
            let b = c.post(&format!("/api/benchmarks/{id}/clone"), &json!({"overrides": overrides}))?;
            if cli.json {
                print_json(&b);
            } else {
                println!("{}", str_of(&b, "id"));
            }
        }
        BenchmarkCmd::Activate { id } | BenchmarkCmd::Deactivate { id } => {
            let active = matches!(cmd, BenchmarkCmd::Activate { .. });
            let b = c.put(&format!("/api/benchmarks/{id}/active"), &json!({"active": active}))?;
            if cli.json {
                print_json(&b);
            } else {
                println!("{} active={}", str_of(&b, "id"), b["active"]);
            }
        }
    }
    Ok(())
}

fn print_execution(cli: &Cli, e: &Value) {
    if cli.json {
        return print_json(e);
    }
    println!("id:          {}", str_of(e, "id"));
    println!("benchmark:   {}", str_of(e, "benchmark_id"));
    println!("state:       {}", str_of(e, "state"));
    println!("status:      {}", str_of(e, "displayed_status"));
    println!("dev mode:    {}", e["dev_mode"]);
    println!("created:     {}", str_of(e, "created_at"));
    println!("deadline:    {}", str_of(e, "deadline_at"));
    let actions: Vec<&str> = e["allowed_actions"]
        .as_array()
        .into_iter()
        .flatten()
        .filter_map(Value::as_str)
        .collect();
    println!("actions:     {}", if actions.is_empty() { "-".into() } else { actions.join(", ") });
    println!("metrics:     {}", e["observation_count"]);
    if let Some(rs) = e["resources"].as_array().filter(|r| !r.is_empty()) {
        println!("resources:");
        for r in rs {
            println!("  {} {} {} {}", str_of(r, "id"), str_of(r, "kind"), str_of(r, "status"), str_of(r, "endpoint"));
        }
    }
    println!("events:");
    for ev in e["events"].as_array().into_iter().flatten() {
        println!("  {}  {}", str_of(ev, "at"), str_of(ev, "event"));
    }
}

fn exec(cli: &Cli, c: &ApiClient, cmd: &ExecCmd) -> CliResult {
    match cmd {
        ExecCmd::Trigger { benchmark } => {
            let e = c.post(&format!("/api/benchmarks/{benchmark}/executions"), &json!({}))?;
            if cli.json {
                print_json(&e);
            } else {
                println!("{}", str_of(&e, "id"));
            }
        }
        ExecCmd::Show { id } => print_execution(cli, &c.get(&format!("/api/executions/{id}"))?),
        ExecCmd::List {
            state,
            benchmark,
            after,
            before,
        } => {
            let mut q = Vec::new();
            for (k, v) in [("state", state), ("benchmark", benchmark), ("after", after), ("before", before)] {
                if let Some(v) = v {
                    q.push(format!("{k}={}", encode(v)));
                }
            }
            let path = if q.is_empty() {
                "/api/executions".to_owned()
            } else {
                format!("/api/executions?{}", q.join("&"))
            };
            let list = c.get(&path)?;
            if cli.json {
                print_json(&list);
            } else {
                let rows: Vec<Vec<String>> = list
                    .as_array()
                    .into_iter()
                    .flatten()
                    .map(|e| {
                        vec![
                            str_of(e, "id").to_owned(),
                            str_of(e, "benchmark_id").to_owned(),
                            str_of(e, "displayed_status").to_owned(),
                            str_of(e, "created_at").to_owned(),
                            str_of(e, "trigger_cause").to_owned(),
                        ]
                    })
                    .collect();
                print_table(&["ID", "BENCHMARK", "STATUS", "CREATED", "CAUSE"], &rows);
            }
        }
        ExecCmd::Log { id, after, follow } => {
            let mut cursor = *after;
            let mut out = std::io::stdout();
            loop {
                let page = c.get(&format!("/api/executions/{id}/log?after={cursor}"))?;
                for line in page["lines"].as_array().into_iter().flatten() {
                    if cli.json {
                        let _ = writeln!(out, "{line}");
                    } else {
                        let _ = writeln!(out, "{}", line.as_str().unwrap_or_default());
                    }
                }
                let _ = out.flush();
                cursor = page["cursor"].as_u64().unwrap_or(cursor as u64) as usize;
                if !*follow || page["terminal"].as_bool().unwrap_or(true) {
                    break;
                }
                std::thread::sleep(Duration::from_secs(2));
            }
        }
        ExecCmd::DevMode { id, mode } => {
            let path = format!("/api/executions/{id}/dev_mode");
            let e = match mode {
                Toggle::On => c.post(&path, &json!({}))?,
                Toggle::Off => c.delete(&path)?,
            };
            print_short(cli, &e);
        }
        ExecCmd::Release { id } => print_short(cli, &c.post(&format!("/api/executions/{id}/release"), &json!({}))?),
        ExecCmd::Reprovision { id } => {
            print_short(cli, &c.post(&format!("/api/executions/{id}/reprovision"), &json!({}))?)
        }
        ExecCmd::Metrics { id } => {
            if cli.json {
                print_json(&c.get(&format!("/api/executions/{id}/metrics"))?);
            } else {
                print!("{}", c.get_text(&format!("/api/executions/{id}/metrics.csv"))?);
            }
        }
    }
    Ok(())
}

fn print_short(cli: &Cli, e: &Value) {
    if cli.json {
        print_json(e);
    } else {
        println!("{} {} dev_mode={}", str_of(e, "id"), str_of(e, "displayed_status"), e["dev_mode"]);
    }
}

/// Percent-encodes a query value.
fn encode(v: &str) -> String {
    v.bytes()
        .map(|b| match b {
            b'A'..=b'Z' | b'a'..=b'z' | b'0'..=b'9' | b'-' | b'_' | b'.' | b'~' => (b as char).to_string(),
            _ => format!("%{b:02X}"),
        })
        .collect()
}

fn stats(cli: &Cli, c: &ApiClient, cmd: &StatsCmd) -> CliResult {
    match cmd {
        StatsCmd::Variability { benchmark, metric } => {
            let row = c.get(&format!("/api/benchmarks/{benchmark}/metrics/{metric}/variability"))?;
            if cli.json {
                print_json(&row);
            } else {
                print_table(
                    &["GROUP", "METRIC", "CV", "EXECUTIONS"],
                    &[vec![
                        str_of(&row, "group").to_owned(),
                        str_of(&row, "metric").to_owned(),
                        str_of(&row, "rendered").to_owned(),
                        row["executions"].to_string(),
                    ]],
                );
            }
        }
    }
    Ok(())
}

fn recipes(cli: &Cli, c: &ApiClient, cmd: &RecipesCmd) -> CliResult {
    match cmd {
        RecipesCmd::List => {
            let list = c.get("/api/recipes")?;
            if cli.json {
                print_json(&list);
            } else {
                let rows: Vec<Vec<String>> = list
                    .as_array()
                    .into_iter()
                    .flatten()
                    .map(|r| {
                        vec![
                            str_of(r, "name").to_owned(),
                            str_of(r, "version").to_owned(),
                            r["steps"].as_array().map_or(0, Vec::len).to_string(),
                        ]
                    })
                    .collect();
                print_table(&["NAME", "VERSION", "STEPS"], &rows);
            }
        }
        RecipesCmd::Add { file } => {
            let r = c.post("/api/recipes", &read_json_file(file)?)?;
            if cli.json {
                print_json(&r);
            } else {
                println!("{}", str_of(&r, "recipe"));
            }
        }
    }
    Ok(())
}

fn clock(cli: &Cli, c: &ApiClient, cmd: &ClockCmd) -> CliResult {
    let r = match cmd {
        ClockCmd::Show => c.get("/api/clock")?,
        ClockCmd::Advance { seconds } => c.post("/api/clock/advance", &serde_json::json!({ "seconds": seconds }))?,
    };
    if cli.json {
        print_json(&r);
    } else {
        println!("{}", str_of(&r, "now"));
    }
    Ok(())
}

fn agent_for(root: &Path) -> Result<Agent<HttpTransport>, CliError> {
    let config = AgentConfig::load(root)?;
    let transport = HttpTransport::new().map_err(|e| CliError::new("transport", e.to_string()))?;
    Ok(Agent::new(config, transport, resource_path(root, SPOOL_DIR)))
}

fn agent(cmd: &AgentCmd) -> CliResult {
    match cmd {
        AgentCmd::Callback { root, phase } => {
            let phase: Phase = phase.parse().map_err(|e: String| CliError::new("usage", e))?;
            let mut agent = agent_for(&root.root)?;
            // Requests spooled by an earlier callback go out first.
            if let Err(e) = agent.flush_spool() {
                eprintln!("spool not flushed: {e}");
            }
            run_callback(&root.root, phase, &mut agent)?;
        }
        AgentCmd::Notify { root, event } => {
            let event: ExecutionEvent = event.parse().map_err(|e: String| CliError::new("usage", e))?;
            let ack = agent_for(&root.root)?.notify(event)?;
            println!("{}", serde_json::to_string(&ack).expect("json"));
        }
        AgentCmd::Submit {
            root,
            metric,
            value,
            offset_ms,
        } => {
            let v = match value.parse::<f64>() {
                Ok(n) => SubmittedValue::Number(n),
                Err(_) => SubmittedValue::Text(value.clone()),
            };
            let ack = agent_for(&root.root)?.submit(metric, v, *offset_ms)?;
            println!("{}", serde_json::to_string(&ack).expect("json"));
        }
        AgentCmd::FlushSpool { root } => {
            let n = agent_for(&root.root)?.flush_spool()?;
            println!("{n}");
        }
    }
    Ok(())
}
