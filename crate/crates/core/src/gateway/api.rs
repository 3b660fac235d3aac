//! REST routes for experimenters (`/api`) and agents (`/agent`).

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::{Path, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post, put};
use axum::{Json, Router};
use chrono::Duration;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::AppState;
use crate::agent::{batch_id, AgentRequest, MetricSubmission, StateUpdate};
use crate::clock::{Clock, Instant};
use crate::model::{BenchmarkDefinition, Execution, LoggedEvent, TriggerCause};
use crate::orchestrator::{DeadlineKind, Orchestrator, OrchestratorError};
use crate::providers::ResourceHandle;
use crate::provisioning::{recipe_to_json, Recipe};
use crate::results::ResultsError;
use crate::statemachine::{allowed_events, ExecutionEvent, ExecutionState};
use crate::store::ExecutionFilter;

// ---------------------------------------------------------------------------
// Errors

#[derive(Debug)]
pub struct ApiError {
    pub status: StatusCode,
    pub kind: &'static str,
    pub message: String,
    pub details: Option<Value>,
}

impl ApiError {
    fn new(status: StatusCode, kind: &'static str, message: impl Into<String>) -> Self {
        Self {
            status,
            kind,
            message: message.into(),
            details: None,
        }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message)
    }
}

impl From<OrchestratorError> for ApiError {
    fn from(e: OrchestratorError) -> Self {
        use OrchestratorError as O;
        let message = e.to_string();
        let (status, kind) = match &e {
            O::BenchmarkNotFound(_) => (StatusCode::NOT_FOUND, "benchmark_not_found"),
            O::ExecutionNotFound(_) => (StatusCode::NOT_FOUND, "execution_not_found"),
            O::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
            O::BenchmarkInactive(_) => (StatusCode::CONFLICT, "benchmark_inactive"),
            O::Conflict(_) | O::Transition(_) => (StatusCode::CONFLICT, "conflict"),
            O::InvalidState(_) => (StatusCode::CONFLICT, "invalid_state"),
            O::AlreadyTerminal(_) => (StatusCode::CONFLICT, "already_terminal"),
            O::NotInDevMode => (StatusCode::CONFLICT, "not_in_dev_mode"),
            O::ResourcesAlreadyReleased => (StatusCode::CONFLICT, "resources_already_released"),
            O::NoPreparingSlot => (StatusCode::CONFLICT, "no_preparing_slot"),
            O::Definition(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_definition"),
            O::Results(ResultsError::InsufficientData) => (StatusCode::CONFLICT, "insufficient_data"),
            O::Results(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_results"),
            O::Provisioning(_) => (StatusCode::UNPROCESSABLE_ENTITY, "invalid_recipe"),
        };
        let details = match &e {
            O::Definition(errs) => Some(json!(errs.0.iter().map(|e| e.to_string()).collect::<Vec<_>>())),
            _ => None,
        };
        Self {
            status,
            kind,
            message,
            details,
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let mut body = json!({"error": self.kind, "message": self.message});
        if let Some(d) = self.details {
            body["details"] = d;
        }
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

/// Runs `f` on the orchestrator under its lock, off the async executor.
async fn with_orch<T, F>(st: &Arc<AppState>, f: F) -> ApiResult<T>
where
    T: Send + 'static,
    F: FnOnce(&mut Orchestrator, Instant) -> ApiResult<T> + Send + 'static,
{
    let st = st.clone();
    tokio::task::spawn_blocking(move || {
        let now = st.clock.now();
        let mut o = st.lock();
        let r = f(&mut o, now);
        st.mark_dirty();
        r
    })
    .await
    .map_err(|e| ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()))?
}

// ---------------------------------------------------------------------------
// Views

/// Operator actions the dashboard offers, derived from the allowed events.
pub fn allowed_actions(state: ExecutionState, dev_mode: bool) -> Vec<&'static str> {
    let events = allowed_events(state, dev_mode);
    let mut out = Vec::new();
    if events.contains(&ExecutionEvent::DevModeEntered) {
        out.push("enter_dev_mode");
    }
    if events.contains(&ExecutionEvent::DevModeExited) {
        out.push("exit_dev_mode");
    }
    if events.contains(&ExecutionEvent::StartedPreparing) && state.is_held_failure() {
        out.push("reprovision");
    }
    if events.contains(&ExecutionEvent::StartedReleasing) {
        out.push("release");
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionSummary {
    pub id: String,
    pub benchmark_id: String,
    pub created_at: Instant,
    pub trigger_cause: TriggerCause,
    pub state: ExecutionState,
    pub displayed_status: String,
    pub dev_mode: bool,
}

impl From<&Execution> for ExecutionSummary {
    fn from(e: &Execution) -> Self {
        Self {
            id: e.id.0.clone(),
            benchmark_id: e.benchmark_id.0.clone(),
            created_at: e.created_at,
            trigger_cause: e.trigger_cause,
            state: e.state,
            displayed_status: e.displayed_status(),
            dev_mode: e.dev_mode,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExecutionView {
    #[serde(flatten)]
    pub summary: ExecutionSummary,
    pub deadline_at: Instant,
    /// Armed run deadline; differs from `deadline_at` after a reprovision.
    pub run_deadline: Option<Instant>,
    pub allowed_events: Vec<ExecutionEvent>,
    pub allowed_actions: Vec<String>,
    pub events: Vec<LoggedEvent>,
    pub resources: Vec<ResourceHandle>,
    pub log_cursor: usize,
    pub observation_count: usize,
}

impl ExecutionView {
    pub fn new(o: &Orchestrator, e: &Execution) -> Self {
        Self {
            summary: e.into(),
            deadline_at: e.deadline_at,
            run_deadline: o
                .timeouts()
                .deadlines_of(&e.id)
                .into_iter()
                .find(|(_, kind, _)| *kind == DeadlineKind::Run)
                .map(|(at, _, _)| at),
            allowed_events: allowed_events(e.state, e.dev_mode),
            allowed_actions: allowed_actions(e.state, e.dev_mode).into_iter().map(str::to_owned).collect(),
            events: e.event_log.clone(),
            resources: e.resources.clone(),
            log_cursor: e.log.len(),
            observation_count: o.store().observations_for(&e.id).len(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LogPage {
    pub lines: Vec<String>,
    pub cursor: usize,
    pub terminal: bool,
}

pub fn benchmark_view(b: &BenchmarkDefinition) -> Value {
    let mut doc = b.to_document();
    doc["id"] = json!(b.id.0);
    doc
}

fn execution_view(o: &Orchestrator, id: &str) -> ApiResult<ExecutionView> {
    let e = o.execution(&id.into())?;
    Ok(ExecutionView::new(o, e))
}

// ---------------------------------------------------------------------------
// Routes

pub fn router(state: Arc<AppState>) -> Router {
    let api = Router::new()
        .route("/benchmarks", post(create_benchmark).get(list_benchmarks))
        .route("/benchmarks/:id", get(show_benchmark))
        .route("/benchmarks/:id/active", put(set_active))
        .route("/benchmarks/:id/clone", post(clone_benchmark))
        .route("/benchmarks/:id/executions", post(trigger))
        .route("/benchmarks/:id/metrics/:name/variability", get(variability))
        .route("/executions", get(list_executions))
        .route("/executions/:id", get(show_execution))
        .route("/executions/:id/log", get(execution_log))
        .route("/executions/:id/metrics", get(execution_metrics))
        .route("/executions/:id/metrics.csv", get(execution_metrics_csv))
        .route("/executions/:id/dev_mode", post(enter_dev_mode).delete(exit_dev_mode))
        .route("/executions/:id/reprovision", post(reprovision))
        .route("/executions/:id/release", post(release))
        .route("/recipes", get(list_recipes).post(add_recipe))
        .route("/clock", get(clock_now))
        .route("/clock/advance", post(clock_advance))
        .route("/resources/leaked", get(leaked))
        .route_layer(middleware::from_fn_with_state(state.clone(), operator_auth))
        .route("/health", get(health));
    let agent = Router::new()
        .route("/executions/:id/state", put(agent_state))
        .route("/executions/:id/metrics", post(agent_metric))
        .route("/executions/:id/metrics/csv", post(agent_csv));
    Router::new()
        .nest("/api", api)
        .nest("/agent", agent)
        .with_state(state)
}

fn bearer(headers: &HeaderMap) -> Option<&str> {
    headers
        .get(header::AUTHORIZATION)?
        .to_str()
        .ok()?
        .strip_prefix("Bearer ")
        .map(str::trim)
}

async fn operator_auth(State(st): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(expected) = &st.operator_token {
        if bearer(req.headers()) != Some(expected.as_str()) {
            return ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong operator token")
                .into_response();
        }
    }
    next.run(req).await
}

async fn health(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({"status": "ok", "clock": st.clock.now()}))
}

async fn create_benchmark(State(st): State<Arc<AppState>>, Json(doc): Json<Value>) -> ApiResult<impl IntoResponse> {
    let b = with_orch(&st, move |o, now| Ok(o.create_benchmark(&doc, now)?)).await?;
    Ok((StatusCode::CREATED, Json(benchmark_view(&b))))
}

async fn list_benchmarks(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<Value>>> {
    with_orch(&st, |o, _| Ok(Json(o.benchmarks().map(benchmark_view).collect()))).await
}

async fn show_benchmark(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    with_orch(&st, move |o, _| Ok(Json(benchmark_view(o.benchmark(&id.into())?)))).await
}

#[derive(Debug, Deserialize)]
struct ActiveBody {
    active: bool,
}

async fn set_active(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(body): Json<ActiveBody>,
) -> ApiResult<Json<Value>> {
    with_orch(&st, move |o, _| {
        let id = id.into();
        o.set_benchmark_active(&id, body.active)?;
        Ok(Json(benchmark_view(o.benchmark(&id)?)))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
struct CloneBody {
    #[serde(default)]
    overrides: BTreeMap<String, Value>,
}

async fn clone_benchmark(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Option<Json<CloneBody>>,
) -> ApiResult<impl IntoResponse> {
    let body = body.map(|b| b.0).unwrap_or_default();
    let b = with_orch(&st, move |o, now| Ok(o.clone_benchmark(&id.into(), &body.overrides, now)?)).await?;
    Ok((StatusCode::CREATED, Json(benchmark_view(&b))))
}

async fn trigger(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<impl IntoResponse> {
    let view = with_orch(&st, move |o, now| {
        let eid = o.trigger(&id.into(), TriggerCause::Manual, now)?;
        // Start right away if a slot is free instead of waiting for the ticker.
        o.tick(now);
        execution_view(o, eid.as_str())
    })
    .await?;
    Ok((StatusCode::CREATED, Json(view)))
}

#[derive(Debug, Deserialize)]
struct VariabilityQuery {
    group: Option<String>,
}

async fn variability(
    State(st): State<Arc<AppState>>,
    Path((id, name)): Path<(String, String)>,
    Query(q): Query<VariabilityQuery>,
) -> ApiResult<Json<Value>> {
    with_orch(&st, move |o, _| {
        let mut row = o.variability(&id.into(), &name)?;
        if let Some(g) = q.group {
            row.group = g;
        }
        Ok(Json(json!({
            "metric": name,
            "group": row.group,
            "executions": row.executions,
            "across_cv_pct": row.across_cv_pct,
            "within_cv_min_pct": row.within_cv_min_pct,
            "within_cv_max_pct": row.within_cv_max_pct,
            "rendered": row.render(),
        })))
    })
    .await
}

#[derive(Debug, Default, Deserialize)]
struct ExecutionQuery {
    state: Option<String>,
    benchmark: Option<String>,
    after: Option<Instant>,
    before: Option<Instant>,
}

async fn list_executions(
    State(st): State<Arc<AppState>>,
    Query(q): Query<ExecutionQuery>,
) -> ApiResult<Json<Vec<ExecutionSummary>>> {
    let state = match q.state.as_deref() {
        Some(s) => Some(s.parse::<ExecutionState>().map_err(ApiError::bad_request)?),
        None => None,
    };
    let filter = ExecutionFilter {
        state,
        benchmark: q.benchmark.map(Into::into),
        created_after: q.after,
        created_before: q.before,
    };
    with_orch(&st, move |o, _| Ok(Json(o.executions(&filter).map(ExecutionSummary::from).collect()))).await
}

async fn show_execution(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ExecutionView>> {
    with_orch(&st, move |o, _| execution_view(o, &id).map(Json)).await
}

#[derive(Debug, Deserialize)]
struct LogQuery {
    #[serde(default)]
    after: usize,
}

async fn execution_log(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    Query(q): Query<LogQuery>,
) -> ApiResult<Json<LogPage>> {
    with_orch(&st, move |o, _| {
        let id = id.into();
        let (lines, cursor) = o.log_after(&id, q.after)?;
        let terminal = o.execution(&id)?.state.is_terminal();
        Ok(Json(LogPage { lines, cursor, terminal }))
    })
    .await
}

async fn execution_metrics(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<Value>> {
    with_orch(&st, move |o, _| Ok(Json(json!(o.observations(&id.into())?)))).await
}

async fn execution_metrics_csv(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let csv = with_orch(&st, move |o, _| Ok(o.metrics_csv(&id.into())?)).await?;
    Ok(([(header::CONTENT_TYPE, "text/csv")], csv).into_response())
}

async fn enter_dev_mode(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ExecutionView>> {
    with_orch(&st, move |o, now| {
        o.enter_dev_mode(&id.clone().into(), now)?;
        execution_view(o, &id).map(Json)
    })
    .await
}

async fn exit_dev_mode(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ExecutionView>> {
    with_orch(&st, move |o, now| {
        o.exit_dev_mode(&id.clone().into(), now)?;
        o.tick(now);
        execution_view(o, &id).map(Json)
    })
    .await
}

async fn reprovision(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ExecutionView>> {
    with_orch(&st, move |o, now| {
        o.reprovision(&id.clone().into(), now)?;
        execution_view(o, &id).map(Json)
    })
    .await
}

async fn release(State(st): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Json<ExecutionView>> {
    with_orch(&st, move |o, now| {
        o.release_now(&id.clone().into(), now)?;
        execution_view(o, &id).map(Json)
    })
    .await
}

async fn list_recipes(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<Value>>> {
    with_orch(&st, |o, _| Ok(Json(o.store().recipes.list().map(recipe_to_json).collect()))).await
}

async fn add_recipe(State(st): State<Arc<AppState>>, Json(doc): Json<Value>) -> ApiResult<impl IntoResponse> {
    let recipe = Recipe::from_json(&doc.to_string()).map_err(|e| ApiError::from(OrchestratorError::from(e)))?;
    let r = with_orch(&st, move |o, _| Ok(o.add_recipe(recipe)?)).await?;
    Ok((StatusCode::CREATED, Json(json!({"recipe": r.to_string()}))))
}

async fn clock_now(State(st): State<Arc<AppState>>) -> Json<Value> {
    Json(json!({"now": st.clock.now(), "simulated": st.scaled_clock.is_some()}))
}

#[derive(Debug, Deserialize)]
struct AdvanceBody {
    seconds: i64,
}

async fn clock_advance(State(st): State<Arc<AppState>>, Json(body): Json<AdvanceBody>) -> ApiResult<Json<Value>> {
    let Some(clock) = st.scaled_clock.clone() else {
        return Err(ApiError::new(StatusCode::CONFLICT, "real_clock", "the server runs on the real clock"));
    };
    if body.seconds < 0 {
        return Err(ApiError::bad_request("seconds must not be negative"));
    }
    let target = clock.now() + Duration::seconds(body.seconds);
    // Step through wakeups so deadlines fire in order.
    with_orch(&st, move |o, now| {
        let mut t = now;
        loop {
            o.tick(t);
            match o.next_wakeup(t) {
                Some(w) if w <= target => t = w.max(t + Duration::seconds(1)),
                _ => break,
            }
        }
        clock.skip(Duration::seconds(body.seconds));
        Ok(())
    })
    .await?;
    Ok(Json(json!({"now": st.clock.now()})))
}

async fn leaked(State(st): State<Arc<AppState>>) -> ApiResult<Json<Vec<ResourceHandle>>> {
    with_orch(&st, |o, _| Ok(Json(o.leaked_resources()))).await
}

// ---------------------------------------------------------------------------
// Agent endpoints

fn agent_token(headers: &HeaderMap) -> ApiResult<String> {
    bearer(headers)
        .map(str::to_owned)
        .ok_or_else(|| ApiError::new(StatusCode::UNAUTHORIZED, "unauthorized", "missing agent token"))
}

async fn agent_call(st: &Arc<AppState>, id: String, token: String, req: AgentRequest) -> ApiResult<Json<Value>> {
    with_orch(st, move |o, now| Ok(Json(json!(o.agent_request(&id.into(), &token, req, now)?)))).await
}

async fn agent_state(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(body): Json<StateUpdate>,
) -> ApiResult<Json<Value>> {
    let token = agent_token(&headers)?;
    agent_call(&st, id, token, AgentRequest::State(body)).await
}

async fn agent_metric(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(body): Json<MetricSubmission>,
) -> ApiResult<Json<Value>> {
    let token = agent_token(&headers)?;
    agent_call(&st, id, token, AgentRequest::Metric(body)).await
}

async fn agent_csv(
    State(st): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    payload: String,
) -> ApiResult<Json<Value>> {
    let token = agent_token(&headers)?;
    let batch = headers
        .get("x-batch-id")
        .and_then(|v| v.to_str().ok())
        .map(str::to_owned)
        .unwrap_or_else(|| batch_id(&id.as_str().into(), &payload));
    agent_call(&st, id, token, AgentRequest::Csv { batch_id: batch, payload }).await
}
