//! HTTP service wiring the orchestrator, providers and store together.

pub mod api;
pub mod config;

use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};
use std::time::Duration as StdDuration;

use thiserror::Error;
use tokio::net::TcpListener;

pub use api::{allowed_actions, router, ExecutionSummary, ExecutionView, LogPage};
pub use config::{BadConfig, ClockMode, ServerConfig};

use crate::clock::{Clock, ScaledClock, SimClock, SystemClock};
use crate::model::ValidationContext;
use crate::orchestrator::{Orchestrator, OrchestratorConfig};
use crate::providers::{LocalDriver, LocalDriverConfig, ProviderRegistry, SimulatedDriver};
use crate::store::Store;

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("address {0} already in use")]
    PortInUse(std::net::SocketAddr),
    #[error(transparent)]
    BadConfig(#[from] BadConfig),
    #[error("store unavailable: {0}")]
    StoreUnavailable(String),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub struct AppState {
    orch: Mutex<Orchestrator>,
    pub clock: Arc<dyn Clock>,
    /// Set when the server runs on simulated time.
    pub scaled_clock: Option<Arc<ScaledClock>>,
    pub operator_token: Option<String>,
    pub state_path: Option<PathBuf>,
    dirty: AtomicBool,
}

impl AppState {
    pub fn new(orch: Orchestrator, clock: Arc<dyn Clock>) -> Self {
        Self {
            orch: Mutex::new(orch),
            clock,
            scaled_clock: None,
            operator_token: None,
            state_path: None,
            dirty: AtomicBool::new(false),
        }
    }

    pub fn with_operator_token(mut self, token: Option<String>) -> Self {
        self.operator_token = token;
        self
    }

    pub fn with_state_path(mut self, path: Option<PathBuf>) -> Self {
        self.state_path = path;
        self
    }

    /// The orchestrator lock. A panic in an earlier holder does not make the
    /// state unusable, so poisoning is ignored.
    pub fn lock(&self) -> MutexGuard<'_, Orchestrator> {
        self.orch.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub(crate) fn mark_dirty(&self) {
        self.dirty.store(true, Ordering::Relaxed);
    }

    /// Writes the snapshot if anything changed since the last save.
    pub fn persist(&self, force: bool) -> std::io::Result<()> {
        let Some(path) = &self.state_path else { return Ok(()) };
        if !force && !self.dirty.swap(false, Ordering::Relaxed) {
            return Ok(());
        }
        let now = self.clock.now();
        let mut o = self.lock();
        o.mark_saved(now);
        o.store().save(path)
    }

    /// One scheduler/deadline/driver pass at the current instant.
    pub fn tick(&self) {
        let now = self.clock.now();
        self.lock().tick(now);
        self.mark_dirty();
    }
}

/// Builds the shared state from a configuration: loads or creates the store,
/// registers the drivers and recovers unfinished executions.
pub fn build_state(cfg: &ServerConfig) -> Result<Arc<AppState>, GatewayError> {
    let loaded = match &cfg.state_path {
        Some(p) => Store::load(p).map_err(|e| GatewayError::StoreUnavailable(format!("{}: {e}", p.display())))?,
        None => None,
    };

    let (clock, scaled): (Arc<dyn Clock>, Option<Arc<ScaledClock>>) = match cfg.clock {
        ClockMode::Real => (Arc::new(SystemClock), None),
        ClockMode::Simulated => {
            // Simulated time resumes where the snapshot left off.
            let epoch = SimClock::at_epoch().now();
            let start = loaded.as_ref().and_then(Store::latest_instant).map_or(epoch, |t| t.max(epoch));
            let c = Arc::new(ScaledClock::new(start, cfg.time_scale));
            (c.clone(), Some(c))
        }
    };
    let recovering = loaded.is_some();
    let store = loaded.unwrap_or_else(Store::new);

    let mut providers = ProviderRegistry::new();
    if cfg.simulated {
        providers.register(Box::new(SimulatedDriver::new(cfg.fault_plan.clone())));
    }
    if let Some(root) = &cfg.local_root {
        let mut lc = LocalDriverConfig::new(root);
        lc.command_timeout = StdDuration::from_secs(cfg.local_command_timeout_secs);
        providers.register(Box::new(LocalDriver::new(lc)?));
    }

    let agent_path = match &cfg.agent_binary {
        Some(p) => p.clone(),
        None => std::env::current_exe()?,
    };
    let agent_payload = std::fs::read(&agent_path)
        .map_err(|e| BadConfig {
            line: None,
            field: Some("agent_binary".into()),
            message: format!("{}: {e}", agent_path.display()),
        })?;

    let ocfg = OrchestratorConfig {
        max_preparing: cfg.max_preparing,
        max_postprocessing: cfg.max_postprocessing,
        server_url: cfg.public_url(),
        agent_payload: Arc::new(agent_payload),
        validation: ValidationContext {
            default_timeout_minutes: cfg.default_timeout_minutes,
            default_release_grace_minutes: cfg.default_release_grace_minutes,
            ..ValidationContext::default()
        },
    };
    let mut orch = Orchestrator::new(ocfg, store, providers);
    if recovering {
        let report = orch.recover(clock.now());
        tracing::info!(
            failed = report.failed.len(),
            rearmed = report.rearmed.len(),
            adopted = report.adopted_handles,
            "recovered state"
        );
    }

    let mut st = AppState::new(orch, clock)
        .with_operator_token(cfg.operator_token.clone())
        .with_state_path(cfg.state_path.clone());
    st.scaled_clock = scaled;
    Ok(Arc::new(st))
}

/// Ticks once per second and snapshots every few seconds until the
/// returned handle is aborted.
pub fn spawn_ticker(st: Arc<AppState>) -> tokio::task::JoinHandle<()> {
    tokio::spawn(async move {
        let mut interval = tokio::time::interval(StdDuration::from_secs(1));
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Skip);
        let mut n: u64 = 0;
        loop {
            interval.tick().await;
            n += 1;
            let st = st.clone();
            let save = n.is_multiple_of(5);
            let r = tokio::task::spawn_blocking(move || {
                st.tick();
                if save {
                    st.persist(false)
                } else {
                    Ok(())
                }
            })
            .await;
            match r {
                Ok(Err(e)) => tracing::error!("snapshot failed: {e}"),
                Err(e) => tracing::error!("tick panicked: {e}"),
                Ok(Ok(())) => {}
            }
        }
    })
}

async fn shutdown_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

/// Runs the service until SIGINT or SIGTERM, then writes a final snapshot.
pub async fn serve(cfg: ServerConfig) -> Result<(), GatewayError> {
    let st = build_state(&cfg)?;
    let listener = TcpListener::bind(cfg.bind).await.map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => GatewayError::PortInUse(cfg.bind),
        _ => GatewayError::Io(e),
    })?;
    tracing::info!("listening on {}", listener.local_addr()?);
    let ticker = spawn_ticker(st.clone());
    axum::serve(listener, router(st.clone()))
        .with_graceful_shutdown(shutdown_signal())
        .await?;
    ticker.abort();
    let _ = ticker.await;
    let st2 = st.clone();
    tokio::task::spawn_blocking(move || st2.persist(true))
        .await
        .map_err(|e| GatewayError::StoreUnavailable(e.to_string()))??;
    tracing::info!("state persisted, shutting down");
    Ok(())
}
